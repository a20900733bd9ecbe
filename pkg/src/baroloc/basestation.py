"""Base-station daemon: read the base barometer, calibrate, fan frames out over TCP.

One producer builds frames at the configured rate (latest sample per tick);
every subscriber has its own bounded queue and writer task, so a slow or dead
client is dropped without disturbing the others.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import signal
import sys
import threading
from dataclasses import dataclass, field

from .atmo import SensorSample
from .calib import CalibrationTable
from .errors import BaroError, DataFormatError, InvalidInputError, MissingCalibrationError
from .logio import SENSOR_HEADER, SensorLog, parse_sample_row, read_single_sensor_csv
from .reference import ReferenceProvider, ReferenceProviderConfig, ReferenceUnavailableError
from .wire import BaseFrame, build_frame, downsample_latest

log = logging.getLogger("basestationd")

DEFAULT_PORT = 7700
QUEUE_BOUND = 64

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


@dataclass
class BaseStationConfig:
    source: str = "stdin"  # replay:FILE | sim:SCENARIO | stdin
    calib: CalibrationTable | None = None
    reference: ReferenceProviderConfig = field(default_factory=ReferenceProviderConfig)
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    rate: float = 3.0  # Hz
    speed: float = 1.0  # replay speed multiplier
    wait_for_subscriber: bool = False  # hold the replay clock until someone connects
    exit_at_end: bool = False  # stop once a finite source is exhausted
    queue_size: int = QUEUE_BOUND

    def __post_init__(self):
        if not self.rate > 0:
            raise InvalidInputError("rate must be > 0")
        if not self.speed > 0:
            raise InvalidInputError("speed must be > 0")


def load_source_log(source: str) -> SensorLog | None:
    """Resolve a finite source spec to its base-sensor log; ``None`` for stdin."""
    kind, _, arg = source.partition(":")
    if kind == "stdin" and not arg:
        return None
    if kind == "replay" and arg:
        return read_single_sensor_csv(arg)
    if kind == "sim" and arg:
        from .sim import Scenario, simulate

        return simulate(Scenario.load(arg)).base
    raise InvalidInputError(f"bad source {source!r}; expected replay:FILE, sim:SCENARIO or stdin")


class _Client:
    def __init__(self, writer: asyncio.StreamWriter, bound: int):
        self.writer = writer
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=bound)
        self.peer = writer.get_extra_info("peername")
        self.sent = 0
        self.task: asyncio.Task | None = None


class BaseStation:
    def __init__(self, config: BaseStationConfig, source_log: SensorLog | None = None,
                 stdin=None, provider: ReferenceProvider | None = None):
        self.config = config
        self.source_log = source_log
        self.stdin = stdin
        self.provider = provider or ReferenceProvider(config.reference)
        self.clients: set[_Client] = set()
        self.seq = 0
        self.frames_produced = 0
        self.clients_dropped = 0
        self.port: int | None = None
        self.error: BaseException | None = None
        self._server: asyncio.base_events.Server | None = None
        self._stop = asyncio.Event()
        self._first_client = asyncio.Event()
        self._tasks: list[asyncio.Task] = []

    # -- lifecycle ---------------------------------------------------------

    def check_calibration(self, sensor_id: str):
        if self.config.calib is not None and sensor_id not in self.config.calib:
            raise MissingCalibrationError(f"calibration has no entry for base sensor {sensor_id!r}")

    async def start(self):
        if self.source_log is not None:
            self.check_calibration(self.source_log.sensor_id)
        await asyncio.to_thread(self.provider.start)
        self._server = await asyncio.start_server(self._on_connect, self.config.host, self.config.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("listening on %s:%d", self.config.host, self.port)
        if self.config.reference.mode != "static":
            self._tasks.append(asyncio.create_task(self._refresh_loop()))
        self._tasks.append(asyncio.create_task(self._produce()))

    def stop(self):
        self._stop.set()

    async def wait_closed(self):
        await self._stop.wait()
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._server.close()
        for c in list(self.clients):
            self._drop(c, "shutdown")
        # give cancelled handlers a chance to close their sockets
        await asyncio.sleep(0)
        await self._server.wait_closed()

    async def run(self):
        await self.start()
        await self.wait_closed()

    # -- clients -------------------------------------------------------------

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        client = _Client(writer, self.config.queue_size)
        self.clients.add(client)
        log.info("subscriber %s connected (%d total)", client.peer, len(self.clients))
        self._first_client.set()
        client.task = asyncio.current_task()
        reader_task = asyncio.create_task(self._watch_eof(reader, client))
        try:
            while True:
                frame = await client.queue.get()
                if frame is None:
                    break
                writer.write(frame.encode())
                await writer.drain()
                client.sent += 1
        except (ConnectionError, OSError) as exc:
            log.info("subscriber %s write failed: %s", client.peer, exc)
        except asyncio.CancelledError:
            pass
        finally:
            reader_task.cancel()
            self._forget(client)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def _watch_eof(self, reader: asyncio.StreamReader, client: _Client):
        try:
            while await reader.read(1024):
                pass
        except (ConnectionError, OSError):
            pass
        if client in self.clients:
            log.info("subscriber %s hung up", client.peer)
            self._forget(client)
            client.task.cancel()

    def _forget(self, client: _Client):
        self.clients.discard(client)

    def _drop(self, client: _Client, why: str):
        if client in self.clients:
            log.warning("dropping subscriber %s: %s", client.peer, why)
            self.clients_dropped += 1
        self._forget(client)
        if client.task is not None:
            client.task.cancel()

    def broadcast(self, frame: BaseFrame):
        self.frames_produced += 1
        for c in list(self.clients):
            try:
                c.queue.put_nowait(frame)
            except asyncio.QueueFull:
                self._drop(c, "queue overflow")

    def make_frame(self, sensor_id, t_ms, pressure, temperature) -> BaseFrame:
        p0, stale = self.provider.current()
        frame = build_frame(sensor_id, self.seq, t_ms, pressure, temperature, self.config.calib, p0, stale)
        self.seq += 1
        return frame

    # -- producers -------------------------------------------------------------

    async def _refresh_loop(self):
        while True:
            await asyncio.sleep(self.config.reference.refresh_interval)
            await asyncio.to_thread(self.provider.refresh)

    async def _produce(self):
        try:
            if self.config.wait_for_subscriber:
                await self._first_client.wait()
            if self.source_log is not None:
                await self._replay(self.source_log)
            else:
                await self._live(self.stdin or sys.stdin)
        except BaroError as exc:
            log.error("%s", exc)
            self.error = exc
            self.stop()
            return
        log.info("source exhausted after %d frames", self.frames_produced)
        if self.config.exit_at_end:
            # let queued frames drain before closing connections
            for _ in range(200):
                if all(c.queue.empty() for c in self.clients):
                    break
                await asyncio.sleep(0.01)
            self.stop()

    async def _replay(self, slog: SensorLog):
        loop = asyncio.get_running_loop()
        plan = downsample_latest(slog.t_ms, self.config.rate)
        if not plan:
            return
        tick0 = plan[0][0]
        wall0 = loop.time()
        for tick, i in plan:
            due = wall0 + (tick - tick0) / 1000.0 / self.config.speed
            delay = due - loop.time()
            await asyncio.sleep(max(0.0, delay))
            self.broadcast(self.make_frame(slog.sensor_id, int(slog.t_ms[i]),
                                           float(slog.pressure[i]), float(slog.temperature[i])))

    async def _live(self, stream):
        """Read CSV rows from ``stream`` in a thread; emit the latest one per tick."""
        loop = asyncio.get_running_loop()
        latest: list = [None]
        done = asyncio.Event()
        errors: list = []

        def reader():
            try:
                for n, line in enumerate(stream, 1):
                    line = line.strip()
                    if not line or (n == 1 and line.replace(" ", "") == ",".join(SENSOR_HEADER)):
                        continue
                    try:
                        sample = parse_sample_row(line.split(","), "<stdin>", n)
                    except DataFormatError as exc:
                        log.warning("skipping %s", exc)
                        continue
                    loop.call_soon_threadsafe(latest.__setitem__, 0, sample)
            except Exception as exc:  # surfaced by the producer
                errors.append(exc)
            finally:
                loop.call_soon_threadsafe(done.set)

        threading.Thread(target=reader, daemon=True, name="stdin-reader").start()
        period = 1.0 / self.config.rate
        last_sent = None
        next_tick = loop.time()
        while True:
            sample: SensorSample | None = latest[0]
            if sample is not None and sample is not last_sent:
                self.check_calibration(sample.sensor_id)
                self.broadcast(self.make_frame(sample.sensor_id, sample.timestamp, sample.pressure,
                                               sample.temperature))
                last_sent = sample
            if done.is_set() and latest[0] is last_sent:
                break
            next_tick += period
            await asyncio.sleep(max(0.0, next_tick - loop.time()))
        if errors:
            raise DataFormatError(f"stdin reader failed: {errors[0]}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="basestationd", description="Stream calibrated base-barometer frames over TCP.")
    add_arguments(p)
    return p


def add_arguments(p: argparse.ArgumentParser):
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--rate", type=float, default=3.0, help="emission rate in Hz (default 3)")
    p.add_argument("--calib", required=True, help="calibration JSON")
    p.add_argument("--source", default="stdin", help="replay:FILE | sim:SCENARIO | stdin")
    p.add_argument("--p0", default="static:1013.25", help="static:V | file:PATH | http:URL")
    p.add_argument("--p0-refresh", type=float, default=300.0, help="reference refresh interval, s")
    p.add_argument("--p0-ttl", type=float, default=900.0, help="reference staleness limit, s")
    p.add_argument("--p0-fallback", type=float, default=None,
                   help="static value used if the first fetch fails")
    p.add_argument("--speed", type=float, default=1.0, help="replay speed multiplier")
    p.add_argument("--wait-for-subscriber", action="store_true",
                   help="start the replay clock when the first subscriber connects")
    p.add_argument("--exit-at-end", action="store_true", help="exit when a replay source is exhausted")
    p.add_argument("--log-level", default="INFO")


def run_from_args(args) -> int:
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        table = CalibrationTable.load(args.calib)
        ref_kw = dict(refresh_interval=args.p0_refresh, ttl=args.p0_ttl)
        if args.p0_fallback is not None:
            ref_kw["static_p0"] = args.p0_fallback
        ref_cfg = ReferenceProviderConfig.parse(args.p0, **ref_kw)
        config = BaseStationConfig(source=args.source, calib=table, reference=ref_cfg, host=args.host,
                                   port=args.port, rate=args.rate, speed=args.speed,
                                   wait_for_subscriber=args.wait_for_subscriber, exit_at_end=args.exit_at_end)
        source_log = load_source_log(args.source)
    except (BaroError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return asyncio.run(_amain(config, source_log))


async def _amain(config: BaseStationConfig, source_log) -> int:
    station = BaseStation(config, source_log)
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, station.stop)
        except (NotImplementedError, RuntimeError):
            pass
    try:
        await station.start()
    except MissingCalibrationError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ReferenceUnavailableError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except OSError as exc:
        log.error("cannot bind %s:%s: %s", config.host, config.port, exc)
        return EXIT_RUNTIME
    await station.wait_closed()
    return EXIT_DATA if station.error is not None else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run_from_args(args)


if __name__ == "__main__":
    sys.exit(main())
