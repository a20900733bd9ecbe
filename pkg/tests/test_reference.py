import json

import pytest

from baroloc.errors import InvalidInputError
from baroloc.reference import (
    ReferenceProvider,
    ReferenceProviderConfig,
    ReferenceUnavailableError,
    fetch_reference,
)
from mockref import MockReference


class Clock:
    def __init__(self, t=1_700_000_000.0):
        self.t = t

    def __call__(self):
        return self.t


def test_static_never_stale():
    clock = Clock()
    prov = ReferenceProvider(ReferenceProviderConfig.parse("static:1013.25"), clock)
    ref = prov.start()
    assert ref.p0 == 1013.25
    clock.t += 10 * 365 * 86400
    assert prov.current() == (1013.25, False)


def test_http_pass_through():
    with MockReference(1008.0) as mock:
        ref = fetch_reference(ReferenceProviderConfig.parse(mock.url))
    assert ref.p0 == 1008.0 and ref.source == "http"


def test_http_down_after_success_goes_stale_and_keeps_value():
    clock = Clock()
    with MockReference(1008.0) as mock:
        cfg = ReferenceProviderConfig.parse(mock.url, refresh_interval=60, ttl=120)
        prov = ReferenceProvider(cfg, clock)
        prov.start()
        mock.up = False
        clock.t += 60
        assert not prov.refresh()
        assert prov.current() == (1008.0, False)
        clock.t += 61
        assert not prov.refresh()
        assert prov.current() == (1008.0, True)
        assert prov.failures == 2
        mock.up, mock.value = True, 1009.5
        assert prov.refresh()
        assert prov.current() == (1009.5, False)


def test_file_mode(tmp_path):
    p = tmp_path / "p0.json"
    p.write_text(json.dumps({"p0_hpa": 1001.5}))
    prov = ReferenceProvider(ReferenceProviderConfig.parse(f"file:{p}"))
    assert prov.start().p0 == 1001.5


def test_no_value_and_no_fallback_is_startup_error(tmp_path):
    prov = ReferenceProvider(ReferenceProviderConfig.parse(f"file:{tmp_path / 'missing.json'}"))
    with pytest.raises(ReferenceUnavailableError):
        prov.start()


def test_static_fallback_used_when_first_fetch_fails(tmp_path):
    cfg = ReferenceProviderConfig.parse(f"file:{tmp_path / 'missing.json'}", static_p0=1010.0)
    assert ReferenceProvider(cfg).start().p0 == 1010.0


def test_bad_body_is_a_failed_fetch(tmp_path):
    p = tmp_path / "p0.json"
    p.write_text(json.dumps({"p0_hpa": "high"}))
    prov = ReferenceProvider(ReferenceProviderConfig.parse(f"file:{p}"))
    assert not prov.refresh()


@pytest.mark.parametrize("spec", ["static:abc", "ftp:x", "nocolon", "file:"])
def test_bad_specs(spec):
    with pytest.raises(InvalidInputError):
        ReferenceProviderConfig.parse(spec)


def test_refresh_must_be_shorter_than_ttl():
    with pytest.raises(InvalidInputError):
        ReferenceProviderConfig("static", 1013.25, refresh_interval=900, ttl=900)


def test_current_before_start():
    with pytest.raises(ReferenceUnavailableError):
        ReferenceProvider(ReferenceProviderConfig()).current()
