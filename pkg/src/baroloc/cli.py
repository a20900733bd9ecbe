"""``barocli``: calibrate, simulate, evaluate, and front the two services.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime/network error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import basestation, mobile
from .calib import DEFAULT_BIN_WIDTH_S, CalibrationTable, calibrate, residual_std
from .errors import BaroError, DataFormatError, InvalidInputError
from .evaluate import DEFAULT_WINDOW_MS, evaluate
from .logio import (
    SensorLog,
    _write_text,
    read_estimates_ndjson,
    read_floor_plan,
    read_sensor_csv,
    read_single_sensor_csv,
    read_truth_csv,
    write_floor_plan,
)
from .mobile import PairingPolicy, batch_estimate, parse_ema
from .sim import Scenario, simulate, write_scenario

log = logging.getLogger("barocli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _level(name) -> int:
    return getattr(logging, str(name).upper(), logging.INFO)


# -- calibrate ------------------------------------------------------------------


def cmd_calibrate(args, out=None) -> int:
    out = out or sys.stdout
    logs: dict[str, SensorLog] = {}
    for path in args.logs:
        for sid, slog in read_sensor_csv(path).items():
            if sid in logs:
                raise DataFormatError(f"sensor {sid!r} appears in more than one log", path)
            logs[sid] = slog.window(args.from_ms, args.to_ms)
    if len(logs) < 2:
        raise InvalidInputError(f"need logs from at least 2 sensors, got {sorted(logs)}")
    table, common, grid, raw = calibrate(logs.values(), args.bin_width, args.p_thresh, args.t_thresh)
    table.save(args.out)
    stds = residual_std(grid, table, common)
    print(f"bin width: {args.bin_width:g} s", file=out)
    print(f"aligned bins: {raw.n_rows}, kept after jump filter (M'): {grid.n_rows}", file=out)
    print(f"{'sensor':<12}{'dp_hpa':>12}{'dt_c':>10}{'resid_p':>10}{'resid_t':>10}", file=out)
    for sid, bp, bt in zip(table.sensor_ids, table.pressure_offset, table.temperature_offset):
        sp, st = stds[sid]
        print(f"{sid:<12}{bp:>+12.5f}{bt:>+10.4f}{sp:>10.5f}{st:>10.4f}", file=out)
    print(f"wrote {args.out}", file=out)
    return EXIT_OK


# -- simulate -------------------------------------------------------------------


def load_scenario(spec: str, seed: int | None = None) -> Scenario:
    scenario = Scenario() if spec == "default" else Scenario.load(spec)
    return scenario if seed is None else scenario.with_seed(seed)


def cmd_simulate(args, out=None) -> int:
    out = out or sys.stdout
    scenario = load_scenario(args.scenario, args.seed)
    result = simulate(scenario)
    paths = write_scenario(result.logs, result.truth, args.out_dir)
    if args.floors_out:
        write_floor_plan(args.floors_out, scenario.floors)
    if args.scenario_out:
        scenario.save(args.scenario_out)
    print(f"seed: {scenario.seed}", file=out)
    for s in (scenario.base, scenario.mobile):
        print(f"sensor {s.sensor_id}: rate {s.rate:g} Hz, sigma_p {s.noise_sigma_p:g} hPa, "
              f"sigma_t {s.noise_sigma_t:g} C", file=out)
    print(f"collocation window: [{scenario.t0_unix_ms}, {scenario.trajectory_start_ms}) ms", file=out)
    print(f"checkpoints: {len(result.truth)}", file=out)
    for p in paths:
        print(f"wrote {p}", file=out)
    return EXIT_OK


# -- eval -----------------------------------------------------------------------


def cmd_eval(args, out=None) -> int:
    out = out or sys.stdout
    plan = read_floor_plan(args.floors)
    truth = read_truth_csv(args.truth)
    config: dict = {"floors": str(args.floors), "truth": str(args.truth)}
    if args.estimates:
        if args.base_log or args.mobile_log:
            raise InvalidInputError("give either --estimates or --base-log/--mobile-log, not both")
        estimates = read_estimates_ndjson(args.estimates)
        config["estimates"] = str(args.estimates)
    else:
        if not (args.base_log and args.mobile_log and args.calib):
            raise InvalidInputError("batch evaluation needs --base-log, --mobile-log and --calib")
        table = CalibrationTable.load(args.calib)
        policy = PairingPolicy(args.max_base_age_ms, args.on_stale, parse_ema(args.ema))
        base_log = read_single_sensor_csv(args.base_log)
        mobile_log = read_single_sensor_csv(args.mobile_log)
        estimates = batch_estimate(base_log, mobile_log, table, plan, policy, p0=args.p0, rate=args.rate)
        config.update(base_log=str(args.base_log), mobile_log=str(args.mobile_log), calib=str(args.calib),
                      p0_hpa=args.p0, rate_hz=args.rate, max_base_age_ms=policy.max_base_age,
                      on_stale=policy.on_stale, ema=policy.ema_alpha)
    if args.scenario:
        sc = load_scenario(args.scenario)
        config["noise"] = {s.sensor_id: {"sigma_p_hpa": s.noise_sigma_p, "sigma_t_c": s.noise_sigma_t}
                           for s in (sc.base, sc.mobile)}
    report = evaluate(estimates, truth, plan, args.window, args.allow_gaps, config)
    if report.uncovered:
        log.warning("uncovered checkpoints: %s", ", ".join(report.uncovered))
    print(report.to_text(), file=out)
    if args.json:
        _write_text(Path(args.json), report.to_json() + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="barocli", description="Differential barometric altimetry toolkit.")
    p.add_argument("--log-level", dest="global_log_level", default=None)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="estimate per-sensor offsets from collocated logs")
    c.add_argument("logs", nargs="+", help="sensor CSV logs")
    c.add_argument("--out", required=True, help="calibration JSON to write")
    c.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH_S, help="bin width in s (default 30)")
    c.add_argument("--p-thresh", type=float, default=1.0, help="jump filter pressure threshold, hPa")
    c.add_argument("--t-thresh", type=float, default=1.0, help="jump filter temperature threshold, C")
    c.add_argument("--from-ms", type=int, default=None, help="ignore samples before this time")
    c.add_argument("--to-ms", type=int, default=None, help="ignore samples at or after this time")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="generate sensor logs and checkpoint truth")
    s.add_argument("scenario", help="scenario JSON, or 'default'")
    s.add_argument("out_dir")
    s.add_argument("--floors-out", default=None, help="also write the floor plan JSON here")
    s.add_argument("--scenario-out", default=None, help="also write the resolved scenario JSON here")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="score estimates against checkpoint truth")
    e.add_argument("--truth", required=True)
    e.add_argument("--floors", required=True)
    e.add_argument("--estimates", default=None, help="estimates NDJSON (online path)")
    e.add_argument("--base-log", default=None)
    e.add_argument("--mobile-log", default=None)
    e.add_argument("--calib", default=None)
    e.add_argument("--p0", type=float, default=1013.25, help="reference pressure for the batch path, hPa")
    e.add_argument("--rate", type=float, default=3.0, help="base frame rate for the batch path, Hz")
    e.add_argument("--max-base-age-ms", type=int, default=2000)
    e.add_argument("--on-stale", choices=("hold_last", "suppress"), default="hold_last")
    e.add_argument("--ema", default="off")
    e.add_argument("--scenario", default=None, help="scenario JSON whose noise settings are echoed")
    e.add_argument("--window", type=int, default=DEFAULT_WINDOW_MS, help="checkpoint match window, +/- ms")
    e.add_argument("--allow-gaps", action="store_true", help="warn instead of failing on uncovered checkpoints")
    e.add_argument("--json", default=None, help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("serve-base", help="run the base-station daemon")
    basestation.add_arguments(b)
    b.set_defaults(func=None, delegate=basestation.run_from_args)

    m = sub.add_parser("run-mobile", help="run the mobile estimation node")
    mobile.add_arguments(m)
    m.set_defaults(func=None, delegate=mobile.run_from_args)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "func", None) is None:
        if args.global_log_level:
            args.log_level = args.global_log_level
        return args.delegate(args)
    logging.basicConfig(level=_level(args.global_log_level or "WARNING"), stream=sys.stderr,
                        format="%(name)s %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (BaroError, ValueError) as exc:
        print(f"barocli {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"barocli {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
