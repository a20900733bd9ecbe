"""Sea-level reference pressure providers (static value, JSON file, HTTP GET).

File and HTTP bodies are ``{"p0_hpa": <number>}``. A provider keeps the last
good value when a refresh fails and reports it stale once it is older than
the configured TTL.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from .atmo import AtmosphereReference
from .errors import BaroError, InvalidInputError

log = logging.getLogger(__name__)


class ReferenceUnavailableError(BaroError):
    """No reference pressure was ever obtained and there is no static fallback."""


@dataclass(frozen=True)
class ReferenceProviderConfig:
    mode: str = "static"  # static | file | http
    static_p0: float | None = 1013.25
    url: str = ""  # http URL or file path
    refresh_interval: float = 300.0  # s
    ttl: float = 900.0  # s
    timeout: float = 5.0  # s, per HTTP request

    def __post_init__(self):
        if self.mode not in ("static", "file", "http"):
            raise InvalidInputError(f"unknown reference mode {self.mode!r}")
        if self.mode == "static" and self.static_p0 is None:
            raise InvalidInputError("static mode needs a value")
        if self.mode != "static" and not self.url:
            raise InvalidInputError(f"{self.mode} mode needs a location")
        if not 0 < self.refresh_interval < self.ttl:
            raise InvalidInputError("need 0 < refresh_interval < ttl")

    @classmethod
    def parse(cls, spec: str, **kw) -> "ReferenceProviderConfig":
        """Parse ``static:V``, ``file:PATH`` or ``http://...`` / ``http:URL``."""
        mode, sep, rest = spec.partition(":")
        if not sep:
            raise InvalidInputError(f"bad reference spec {spec!r}")
        if mode == "static":
            try:
                return cls("static", float(rest), **kw)
            except ValueError:
                raise InvalidInputError(f"bad static reference {rest!r}") from None
        if mode == "file":
            return cls("file", kw.pop("static_p0", None), url=rest, **kw)
        if mode in ("http", "https"):
            url = rest if rest.startswith(("http://", "https://")) else spec
            return cls("http", kw.pop("static_p0", None), url=url, **kw)
        raise InvalidInputError(f"unknown reference mode {mode!r}")


def _parse_body(raw: bytes | str) -> float:
    doc = json.loads(raw)
    value = doc["p0_hpa"] if isinstance(doc, dict) else doc
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"p0_hpa is not a number: {value!r}")
    return float(value)


def fetch_reference(config: ReferenceProviderConfig, now_ms: int | None = None) -> AtmosphereReference:
    """One fetch, no retention. Raises on any failure."""
    if now_ms is None:
        now_ms = int(time.time() * 1000)
    if config.mode == "static":
        return AtmosphereReference(float(config.static_p0), now_ms, "static")
    if config.mode == "file":
        value = _parse_body(Path(config.url).read_text(encoding="utf-8"))
        return AtmosphereReference(value, now_ms, "file")
    with urllib.request.urlopen(config.url, timeout=config.timeout) as resp:
        value = _parse_body(resp.read())
    return AtmosphereReference(value, now_ms, "http")


class ReferenceProvider:
    """Holds the latest reference; safe to read from any thread."""

    def __init__(self, config: ReferenceProviderConfig, clock=time.time):
        self.config = config
        self._clock = clock
        self._lock = threading.Lock()
        self._ref: AtmosphereReference | None = None
        self.failures = 0

    def _now_ms(self) -> int:
        return int(self._clock() * 1000)

    def refresh(self) -> bool:
        """Try one fetch; keep the previous value on failure."""
        try:
            ref = fetch_reference(self.config, self._now_ms())
        except (OSError, ValueError, KeyError, TypeError, urllib.error.URLError, InvalidInputError) as exc:
            self.failures += 1
            log.warning("reference refresh failed (%s): %s", self.config.mode, exc)
            return False
        with self._lock:
            self._ref = ref
        return True

    def start(self) -> AtmosphereReference:
        """Initial fetch; falls back to the static value, else raises."""
        if not self.refresh():
            if self.config.static_p0 is None:
                raise ReferenceUnavailableError(f"could not obtain reference pressure from {self.config.url}")
            log.warning("using static fallback reference %.2f hPa", self.config.static_p0)
            with self._lock:
                self._ref = AtmosphereReference(float(self.config.static_p0), self._now_ms(), "static")
        return self._ref

    @property
    def reference(self) -> AtmosphereReference | None:
        with self._lock:
            return self._ref

    def current(self) -> tuple[float, bool]:
        """``(p0_hpa, stale)`` for the value frames should carry now."""
        ref = self.reference
        if ref is None:
            raise ReferenceUnavailableError("provider not started")
        return ref.p0, ref.is_stale(self._now_ms(), self.config.ttl)
