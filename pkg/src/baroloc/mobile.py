"""Mobile estimation node.

Mobile samples are paired with the base frame nearest in time, converted to
heights with the frame's reference pressure, and labelled with a floor.

Online and offline runs share :class:`Estimator`. A mobile sample is only
processed once the base stream has delivered a frame at or after its
timestamp (so its nearest frame is known), or once the base is considered
stalled and the sample has waited ``max_base_age`` of mobile time. With a
healthy stream that makes the online output identical to
:func:`batch_estimate` on the same logs.
"""

from __future__ import annotations

import argparse
import asyncio
import bisect
import json
import logging
import signal
import sys
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

from .atmo import AltitudeEstimate, FloorPlan, SensorSample, floor_index, pressure_to_height
from .calib import CalibrationTable, apply_calibration
from .errors import BaroError, DataFormatError, InvalidInputError, MissingCalibrationError
from .logio import SENSOR_HEADER, SensorLog, parse_sample_row, read_floor_plan, read_single_sensor_csv
from .wire import BaseFrame, FrameError, decode_frame, frames_from_log

log = logging.getLogger("mobilenode")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


@dataclass(frozen=True)
class PairingPolicy:
    max_base_age: int = 2000  # ms
    on_stale: str = "hold_last"  # hold_last | suppress
    ema_alpha: float | None = None  # None disables smoothing

    def __post_init__(self):
        if not self.max_base_age > 0:
            raise InvalidInputError("max_base_age must be > 0")
        if self.on_stale not in ("hold_last", "suppress"):
            raise InvalidInputError(f"unknown on_stale policy {self.on_stale!r}")
        if self.ema_alpha is not None and not 0 < self.ema_alpha <= 1:
            raise InvalidInputError("ema alpha must be in (0, 1]")


class Estimator:
    """Pairs mobile samples with base frames and produces :class:`AltitudeEstimate` records."""

    def __init__(self, table: CalibrationTable, plan: FloorPlan, policy: PairingPolicy = PairingPolicy(),
                 passthrough_uncalibrated: bool = False):
        self.table = table
        self.plan = plan
        self.policy = policy
        self.passthrough = passthrough_uncalibrated
        self._frame_t: list[int] = []
        self._frames: list[BaseFrame] = []
        self._pending: deque[SensorSample] = deque()
        self._last_t: int | None = None
        self._ema: tuple[float, float] | None = None
        self.watermark: int | None = None
        self.gaps = 0
        self.out_of_order = 0
        self.frames_seen = 0

    def add_frame(self, frame: BaseFrame):
        self.frames_seen += 1
        if self._frame_t and frame.t_unix_ms < self._frame_t[-1]:
            k = bisect.bisect_right(self._frame_t, frame.t_unix_ms)
            self._frame_t.insert(k, frame.t_unix_ms)
            self._frames.insert(k, frame)
        else:
            self._frame_t.append(frame.t_unix_ms)
            self._frames.append(frame)
        if self.watermark is None or frame.t_unix_ms > self.watermark:
            self.watermark = frame.t_unix_ms

    def add_mobile(self, sample: SensorSample):
        if self._last_t is not None and sample.timestamp < self._last_t:
            self.out_of_order += 1
            return
        if self._pending and sample.timestamp < self._pending[-1].timestamp:
            k = bisect.bisect_right([s.timestamp for s in self._pending], sample.timestamp)
            self._pending.insert(k, sample)
        else:
            self._pending.append(sample)

    @property
    def pending(self) -> int:
        return len(self._pending)

    def oldest_pending(self) -> int | None:
        return self._pending[0].timestamp if self._pending else None

    def drain(self, force_before: int | None = None, force_all: bool = False) -> list[AltitudeEstimate]:
        """Process every pending sample that is ready.

        A sample is ready when the watermark has reached it, when its
        timestamp is below ``force_before``, or when ``force_all`` is set.
        """
        out = []
        while self._pending:
            s = self._pending[0]
            ready = (force_all
                     or (self.watermark is not None and self.watermark >= s.timestamp)
                     or (force_before is not None and s.timestamp < force_before))
            if not ready:
                break
            self._pending.popleft()
            est = self._estimate(s)
            self._last_t = s.timestamp
            if est is not None:
                out.append(est)
        return out

    def _select(self, t: int) -> tuple[BaseFrame | None, str]:
        ft = self._frame_t
        k = bisect.bisect_left(ft, t)
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(ft):
                if best is None or abs(ft[j] - t) < abs(ft[best] - t):
                    best = j
        if best is not None and abs(ft[best] - t) <= self.policy.max_base_age:
            frame, quality = self._frames[best], "fresh"
        elif self.policy.on_stale == "hold_last" and bisect.bisect_right(ft, t) > 0:
            best = bisect.bisect_right(ft, t) - 1
            frame, quality = self._frames[best], "held_base"
        else:
            return None, "gap"
        self._prune(best - 1)
        return frame, quality

    def _prune(self, keep_from: int):
        # samples are processed in time order, so frames older than the
        # neighbour of the one just used can never be selected again
        if keep_from > 256:
            del self._frame_t[:keep_from]
            del self._frames[:keep_from]

    def _estimate(self, sample: SensorSample) -> AltitudeEstimate | None:
        degraded = False
        try:
            sample = apply_calibration(sample, self.table)
        except MissingCalibrationError:
            if not self.passthrough:
                raise
            degraded = True
        frame, quality = self._select(sample.timestamp)
        if frame is None:
            self.gaps += 1
            return None
        if not frame.calibrated:
            degraded = True
        h_m = pressure_to_height(sample.pressure, sample.temperature, frame.p0_hpa)
        h_b = pressure_to_height(frame.p_hpa, frame.temp_c, frame.p0_hpa)
        alpha = self.policy.ema_alpha
        if alpha is not None:
            if self._ema is None:
                self._ema = (h_m, h_b)
            else:
                pm, pb = self._ema
                self._ema = (pm + alpha * (h_m - pm), pb + alpha * (h_b - pb))
            h_m, h_b = self._ema
        dh = h_m - h_b
        idx, label = floor_index(dh, self.plan)
        if degraded:
            quality = "degraded"
        return AltitudeEstimate(sample.timestamp, h_m, h_b, dh, idx, label,
                                abs(sample.timestamp - frame.t_unix_ms), quality)


def batch_estimate(base_log: SensorLog | Iterable[BaseFrame], mobile_log: SensorLog, calib: CalibrationTable,
                   plan: FloorPlan, policy: PairingPolicy = PairingPolicy(), p0: float = 1013.25,
                   rate: float = 3.0, passthrough_uncalibrated: bool = False) -> list[AltitudeEstimate]:
    """Offline twin of the online node.

    ``base_log`` is either the raw base-sensor log (turned into frames exactly
    as the base station would, at ``rate`` with static ``p0``) or an iterable
    of already-received frames.
    """
    if isinstance(base_log, SensorLog):
        frames = [f for _, f in frames_from_log(base_log, calib, p0, rate)]
    else:
        frames = list(base_log)
    est = Estimator(calib, plan, policy, passthrough_uncalibrated)
    for f in frames:
        est.add_frame(f)
    for s in mobile_log.sorted().samples():
        est.add_mobile(s)
    return est.drain(force_all=True)


# -- online node ----------------------------------------------------------------


@dataclass
class NodeStats:
    frames: int = 0
    malformed_frames: int = 0
    seq_gaps: int = 0
    connects: int = 0
    estimates: int = 0
    gaps: int = 0


class MobileNode:
    def __init__(self, base_host: str, base_port: int, mobile_source, estimator: Estimator,
                 out: TextIO | None = None, out_file: Path | None = None, speed: float = 1.0,
                 stall_timeout: float = 1.0, backoff_initial: float = 1.0, backoff_cap: float = 30.0,
                 queue_size: int = 1024, wait_for_base: bool = True):
        self.base_host = base_host
        self.base_port = base_port
        self.mobile_source = mobile_source  # SensorLog (replay) or text stream (live)
        self.estimator = estimator
        self.out = out
        self.out_file = out_file
        self.speed = speed
        self.stall_timeout = stall_timeout
        self.backoff_initial = backoff_initial
        self.backoff_cap = backoff_cap
        self.wait_for_base = wait_for_base
        self.stats = NodeStats()
        self.estimates: list[AltitudeEstimate] = []
        self._events: asyncio.Queue = asyncio.Queue(maxsize=queue_size)
        self._base_connected = asyncio.Event()
        self._stop = asyncio.Event()
        self._last_frame_wall: float | None = None
        self._connected = False
        self._mobile_done = False
        self._latest_mobile: int | None = None
        self._fh = None

    def stop(self):
        self._stop.set()

    async def run(self) -> list[AltitudeEstimate]:
        if self.out_file is not None:
            self._fh = open(self.out_file, "a", encoding="utf-8")
        tasks = [asyncio.create_task(self._base_reader()), asyncio.create_task(self._mobile_reader())]
        try:
            await self._loop()
        finally:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            if self._fh is not None:
                self._fh.close()
        log.info("done: %d estimates, %d gaps, %d frames (%d malformed, %d seq gaps), %d connects",
                 self.stats.estimates, self.estimator.gaps, self.stats.frames, self.stats.malformed_frames,
                 self.stats.seq_gaps, self.stats.connects)
        self.stats.gaps = self.estimator.gaps
        return self.estimates

    # -- inputs ------------------------------------------------------------------

    async def _base_reader(self):
        delay = self.backoff_initial
        while not self._stop.is_set():
            try:
                reader, writer = await asyncio.open_connection(self.base_host, self.base_port)
            except OSError as exc:
                log.warning("base %s:%d unreachable (%s); retrying in %.1fs",
                            self.base_host, self.base_port, exc, delay)
                await asyncio.sleep(delay)
                delay = min(delay * 2, self.backoff_cap)
                continue
            self.stats.connects += 1
            log.info("connected to base %s:%d", self.base_host, self.base_port)
            await self._events.put(("up", None))
            last_seq = None
            try:
                while True:
                    line = await reader.readline()
                    if not line:
                        break
                    try:
                        frame = decode_frame(line)
                    except FrameError as exc:
                        self.stats.malformed_frames += 1
                        log.warning("skipping malformed frame: %s", exc)
                        continue
                    if last_seq is None:
                        delay = self.backoff_initial
                    elif frame.seq != last_seq + 1:
                        self.stats.seq_gaps += 1
                    last_seq = frame.seq
                    await self._events.put(("frame", frame))
            except (ConnectionError, OSError) as exc:
                log.warning("base connection lost: %s", exc)
            finally:
                writer.close()
            await self._events.put(("down", None))
            log.warning("base stream closed; reconnecting in %.1fs", delay)
            await asyncio.sleep(delay)
            delay = min(delay * 2, self.backoff_cap)

    async def _mobile_reader(self):
        if self.wait_for_base and isinstance(self.mobile_source, SensorLog):
            await self._base_connected.wait()
        try:
            if isinstance(self.mobile_source, SensorLog):
                await self._replay(self.mobile_source)
            else:
                await self._live(self.mobile_source)
        finally:
            await self._events.put(("eof", None))

    async def _replay(self, mlog: SensorLog):
        loop = asyncio.get_running_loop()
        if len(mlog) == 0:
            return
        t0 = int(mlog.t_ms[0])
        wall0 = loop.time()
        for s in mlog.samples():
            due = wall0 + (s.timestamp - t0) / 1000.0 / self.speed
            await asyncio.sleep(max(0.0, due - loop.time()))
            await self._events.put(("mobile", s))

    async def _live(self, stream):
        loop = asyncio.get_running_loop()
        q: asyncio.Queue = asyncio.Queue()

        def reader():
            for n, line in enumerate(stream, 1):
                line = line.strip()
                if not line or (n == 1 and line.replace(" ", "") == ",".join(SENSOR_HEADER)):
                    continue
                try:
                    sample = parse_sample_row(line.split(","), "<stdin>", n)
                except DataFormatError as exc:
                    log.warning("skipping %s", exc)
                    continue
                loop.call_soon_threadsafe(q.put_nowait, sample)
            loop.call_soon_threadsafe(q.put_nowait, None)

        threading.Thread(target=reader, daemon=True, name="mobile-reader").start()
        while (sample := await q.get()) is not None:
            await self._events.put(("mobile", sample))

    # -- estimation loop -----------------------------------------------------------

    def _base_stalled(self, now: float) -> bool:
        if not self._connected:
            return True
        if self._last_frame_wall is None:
            return False
        return now - self._last_frame_wall > self.stall_timeout

    def _emit(self, estimates):
        for e in estimates:
            line = json.dumps(e.to_record())
            if self.out is not None:
                self.out.write(line + "\n")
                self.out.flush()
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()
            self.estimates.append(e)
            self.stats.estimates += 1

    async def _loop(self):
        loop = asyncio.get_running_loop()
        est = self.estimator
        tick = min(0.05, self.stall_timeout / 4)
        while not self._stop.is_set():
            try:
                kind, item = await asyncio.wait_for(self._events.get(), timeout=tick)
            except asyncio.TimeoutError:
                kind, item = "tick", None
            now = loop.time()
            if kind == "frame":
                self.stats.frames += 1
                self._last_frame_wall = now
                est.add_frame(item)
            elif kind == "mobile":
                est.add_mobile(item)
                self._latest_mobile = item.timestamp
            elif kind == "up":
                self._connected = True
                self._last_frame_wall = now
                self._base_connected.set()
            elif kind == "down":
                self._connected = False
            elif kind == "eof":
                self._mobile_done = True
            force_before = None
            if self._base_stalled(now) and self._latest_mobile is not None:
                # waited a full pairing window of mobile time without base progress
                force_before = self._latest_mobile - est.policy.max_base_age + 1
                if self._mobile_done:
                    force_before = None
            flush_all = self._mobile_done and (
                est.pending == 0
                or (est.watermark is not None and est.watermark >= (self._latest_mobile or 0))
                or self._base_stalled(now)
            )
            self._emit(est.drain(force_before=force_before, force_all=flush_all))
            if self._mobile_done and est.pending == 0:
                return


def parse_mobile_source(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "stdin" and not arg:
        return sys.stdin
    if kind == "replay" and arg:
        return read_single_sensor_csv(arg)
    if kind == "sim" and arg:
        from .sim import Scenario, simulate

        return simulate(Scenario.load(arg)).mobile
    raise InvalidInputError(f"bad mobile source {spec!r}; expected replay:FILE, sim:SCENARIO or stdin")


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise InvalidInputError(f"bad endpoint {text!r}, expected host:port")
    try:
        return host, int(port)
    except ValueError:
        raise InvalidInputError(f"bad port in {text!r}") from None


def parse_ema(text: str) -> float | None:
    if text.lower() in ("off", "none", "0"):
        return None
    try:
        return float(text)
    except ValueError:
        raise InvalidInputError(f"bad --ema value {text!r}") from None


def add_arguments(p: argparse.ArgumentParser):
    p.add_argument("--base", required=True, help="base station host:port")
    p.add_argument("--mobile", required=True, help="replay:FILE | sim:SCENARIO | stdin")
    p.add_argument("--calib", required=True, help="calibration JSON")
    p.add_argument("--floors", required=True, help="floor plan JSON")
    p.add_argument("--max-base-age-ms", type=int, default=2000)
    p.add_argument("--on-stale", choices=("hold_last", "suppress"), default="hold_last")
    p.add_argument("--ema", default="off", help="off or smoothing factor in (0, 1]")
    p.add_argument("--speed", type=float, default=1.0, help="replay speed multiplier")
    p.add_argument("--stall-timeout", type=float, default=1.0,
                   help="wall seconds without base frames before the base counts as stalled")
    p.add_argument("--out", default=None, help="also append estimates to this file")
    p.add_argument("--passthrough-uncalibrated", action="store_true",
                   help="emit degraded estimates for a mobile sensor missing from the calibration")
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobilenode", description="Differential altitude and floor estimation.")
    add_arguments(p)
    return p


def run_from_args(args) -> int:
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        host, port = parse_endpoint(args.base)
        table = CalibrationTable.load(args.calib)
        plan = read_floor_plan(args.floors)
        policy = PairingPolicy(args.max_base_age_ms, args.on_stale, parse_ema(args.ema))
        source = parse_mobile_source(args.mobile)
        if isinstance(source, SensorLog) and source.sensor_id not in table and not args.passthrough_uncalibrated:
            raise MissingCalibrationError(f"calibration has no entry for mobile sensor {source.sensor_id!r}")
    except (BaroError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    node = MobileNode(host, port, source, Estimator(table, plan, policy, args.passthrough_uncalibrated),
                      out=sys.stdout, out_file=Path(args.out) if args.out else None, speed=args.speed,
                      stall_timeout=args.stall_timeout)
    try:
        asyncio.run(_amain(node))
    except MissingCalibrationError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


async def _amain(node: MobileNode):
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, node.stop)
        except (NotImplementedError, RuntimeError):
            pass
    await node.run()


def main(argv=None) -> int:
    return run_from_args(build_parser().parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
