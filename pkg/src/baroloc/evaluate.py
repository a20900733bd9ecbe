"""Checkpoint evaluation: height RMSE and floor-detection accuracy."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .atmo import AltitudeEstimate, FloorPlan, floor_index
from .errors import BaroError
from .logio import Checkpoint

DEFAULT_WINDOW_MS = 500
SYNTHETIC_NOTE = ("Synthetic desk-scale evaluation: ground truth comes from the simulator, "
                  "not from surveyed checkpoints in a physical building.")


class UncoveredCheckpointError(BaroError):
    """A truth checkpoint has no estimate inside the matching window."""


@dataclass(frozen=True)
class CheckpointResult:
    label: str
    t_ms: int
    truth_m: float
    estimate_m: float
    error_m: float
    floor_truth: int
    floor_est: int
    estimate_t_ms: int


@dataclass
class EvalReport:
    rmse_m: float
    floor_accuracy_pct: float
    per_checkpoint: list[CheckpointResult]
    n_checkpoints: int
    uncovered: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    note: str = SYNTHETIC_NOTE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_checkpoint"] = [asdict(r) for r in self.per_checkpoint]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [self.note, ""]
        lines.append(f"{'label':<8}{'t_unix_ms':>15}{'truth_m':>10}{'est_m':>10}{'err_m':>9}{'floor':>8}{'est':>6}")
        for r in self.per_checkpoint:
            lines.append(f"{r.label:<8}{r.t_ms:>15}{r.truth_m:>10.3f}{r.estimate_m:>10.3f}"
                         f"{r.error_m:>+9.3f}{r.floor_truth:>8}{r.floor_est:>6}")
        if self.uncovered:
            lines.append(f"uncovered: {', '.join(self.uncovered)}")
        lines.append("")
        lines.append(f"checkpoints: {self.n_checkpoints}")
        lines.append(f"RMSE (m): {self.rmse_m:.3f}")
        lines.append(f"Floor detection accuracy (%): {self.floor_accuracy_pct:.1f}")
        return "\n".join(lines)


def nearest_estimate(estimates: Sequence[AltitudeEstimate], times: Sequence[int], t: int,
                     window_ms: int) -> AltitudeEstimate | None:
    """Estimate closest to ``t`` within ``window_ms``; the earlier one wins a tie."""
    k = bisect.bisect_left(times, t)
    best = None
    for j in (k - 1, k):
        if 0 <= j < len(times) and abs(times[j] - t) <= window_ms:
            if best is None or abs(times[j] - t) < abs(times[best] - t):
                best = j
    return None if best is None else estimates[best]


def evaluate(estimates: Sequence[AltitudeEstimate], truth: Sequence[Checkpoint], plan: FloorPlan,
             window_ms: int = DEFAULT_WINDOW_MS, allow_gaps: bool = False, config: dict | None = None) -> EvalReport:
    """Match each checkpoint to its nearest estimate and score height and floor."""
    estimates = sorted(estimates, key=lambda e: e.timestamp)
    times = [e.timestamp for e in estimates]
    rows: list[CheckpointResult] = []
    uncovered: list[str] = []
    for cp in truth:
        e = nearest_estimate(estimates, times, cp.t_ms, window_ms)
        if e is None:
            uncovered.append(cp.label)
            continue
        rows.append(CheckpointResult(
            label=cp.label,
            t_ms=cp.t_ms,
            truth_m=cp.height,
            estimate_m=e.delta_h,
            error_m=e.delta_h - cp.height,
            floor_truth=floor_index(cp.height, plan)[0],
            floor_est=floor_index(e.delta_h, plan)[0],
            estimate_t_ms=e.timestamp,
        ))
    if uncovered and not allow_gaps:
        raise UncoveredCheckpointError(f"no estimate within +/-{window_ms} ms of: {', '.join(uncovered)}")
    if not rows:
        raise UncoveredCheckpointError("no checkpoint overlaps the estimates")
    n = len(rows)
    rmse = math.sqrt(sum(r.error_m ** 2 for r in rows) / n)
    correct = sum(r.floor_truth == r.floor_est for r in rows)
    cfg = {"window_ms": window_ms, **(config or {})}
    return EvalReport(rmse, 100.0 * correct / n, rows, n, uncovered, cfg)
