"""Desk-scale checkpoint benchmark: simulate, calibrate and evaluate the default
scenario over many seeds through the ``barocli`` commands."""

import argparse
import contextlib
import io
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from baroloc.cli import main as barocli
from baroloc.sim import Scenario


def run_seed(work: Path, seed: int, ema: str, scenario: str) -> dict:
    d = work / f"seed{seed}"
    sc = Scenario() if scenario == "default" else Scenario.load(scenario)
    quiet = ["--log-level", "ERROR"]
    if barocli([*quiet, "--seed", str(seed), "simulate", scenario, str(d / "run"), "--floors-out",
                str(d / "floors.json"), "--scenario-out", str(d / "scenario.json")]):
        raise SystemExit(f"simulate failed for seed {seed}")
    if barocli([*quiet, "calibrate", str(d / "run" / f"{sc.base.sensor_id}.csv"),
                str(d / "run" / f"{sc.mobile.sensor_id}.csv"), "--to-ms", str(sc.trajectory_start_ms),
                "--out", str(d / "calib.json")]):
        raise SystemExit(f"calibrate failed for seed {seed}")
    report = d / "report.json"
    if barocli([*quiet, "eval", "--truth", str(d / "run" / "truth.csv"), "--floors", str(d / "floors.json"),
                "--base-log", str(d / "run" / f"{sc.base.sensor_id}.csv"),
                "--mobile-log", str(d / "run" / f"{sc.mobile.sensor_id}.csv"), "--calib", str(d / "calib.json"),
                "--p0", repr(sc.p0), "--ema", ema, "--scenario", str(d / "scenario.json"), "--json", str(report)]):
        raise SystemExit(f"eval failed for seed {seed}")
    return json.loads(report.read_text())


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ema", default="0.2", help="smoothing factor, or 'off'")
    p.add_argument("--scenario", default="default")
    p.add_argument("--keep", default=None, help="keep the per-seed files in this directory")
    args = p.parse_args(argv)
    start = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(args.keep or tmp)
        with contextlib.redirect_stdout(io.StringIO()):
            reports = [run_seed(work, s, args.ema, args.scenario) for s in range(args.seeds)]
    elapsed = time.perf_counter() - start
    print(reports[0]["note"])
    noise = reports[0]["config"].get("noise", {})
    print("noise: " + ", ".join(f"{k} sigma_p={v['sigma_p_hpa']} hPa sigma_t={v['sigma_t_c']} C"
                                for k, v in noise.items()))
    print(f"smoothing: {args.ema}")
    print(f"{'seed':>4}{'RMSE (m)':>10}{'floor acc (%)':>15}{'n':>4}")
    for s, r in enumerate(reports):
        print(f"{s:>4}{r['rmse_m']:>10.3f}{r['floor_accuracy_pct']:>15.1f}{r['n_checkpoints']:>4}")
    rmse = np.array([r["rmse_m"] for r in reports])
    print(f"median RMSE {np.median(rmse):.3f} m, max {rmse.max():.3f} m, "
          f"{int(np.sum(rmse > 0.30))} seed(s) above 0.30 m; {elapsed:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
