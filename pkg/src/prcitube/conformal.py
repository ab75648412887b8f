"""Split-conformal calibration of the tracking residual.

The nonconformity score of a closed-loop record is the worst residual norm
over its time grid (the continuous-time sup realized on the only samples
that exist).  With N2 calibration scores and miscoverage alpha, the
conformal quantile is the j-th smallest score, j = ceil((1-alpha)(N2+1)),
computed in exact integer arithmetic.  j > N2 yields +inf: the guarantee is
vacuous at that (N2, alpha) and the flag makes it visible rather than
raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .control import residual_norms
from .errors import InsufficientCalibrationData, InvalidAlpha
from .predictor import TrainingDataset, UncertaintyPredictor
from .systems import DynamicalSystem, TrajectoryRecord

Array = np.ndarray


def conformal_index(n_scores: int, alpha: float) -> int:
    """ceil((1-alpha)(n+1)) without floating-point ceiling artifacts."""
    a = Fraction(*float(alpha).as_integer_ratio())
    target = (1 - a) * (n_scores + 1)
    return -((-target.numerator) // target.denominator)


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    scores: Array               # sorted ascending
    alpha: float
    quantile_index: int         # 1-indexed order statistic
    quantile_value: float       # +inf when the index exceeds the sample
    metadata: dict = field(default_factory=dict)

    @property
    def n_scores(self) -> int:
        return len(self.scores)

    @property
    def infinite(self) -> bool:
        return not np.isfinite(self.quantile_value)

    def summary(self) -> str:
        q = "inf (coverage unattainable at this N2, alpha)" if self.infinite else f"{self.quantile_value:.6g}"
        return (
            f"N2={self.n_scores}  alpha={self.alpha:g}  "
            f"j_alpha={self.quantile_index}  quantile={q}"
        )

    def to_json_dict(self) -> dict:
        return {
            "scores": list(map(float, self.scores)),
            "alpha": self.alpha,
            "quantile_index": self.quantile_index,
            "quantile_value": self.quantile_value if not self.infinite else "inf",
            "metadata": self.metadata,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CalibrationResult":
        q = d["quantile_value"]
        return CalibrationResult(
            np.array(d["scores"], dtype=float),
            d["alpha"],
            d["quantile_index"],
            np.inf if q == "inf" else float(q),
            d.get("metadata", {}),
        )


def calibrate(scores: Sequence[float], alpha: float, metadata: Optional[dict] = None) -> CalibrationResult:
    """Sort the scores and pick the conformal order statistic."""
    if not (0.0 < alpha < 1.0):
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha!r}")
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    s = np.sort(scores, kind="stable")
    j = conformal_index(s.size, alpha)
    value = float(s[j - 1]) if j <= s.size else np.inf
    return CalibrationResult(s, float(alpha), j, value, metadata or {})


def empirical_coverage(test_scores: Sequence[float], quantile_value: float) -> float:
    """Fraction of test scores at or below the quantile."""
    t = np.asarray(test_scores, dtype=float)
    if t.size == 0:
        raise ValueError("test_scores must be non-empty")
    return float(np.mean(t <= quantile_value))


def nonconformity_score(
    record: TrajectoryRecord, predictor: Optional[UncertaintyPredictor], sys_true: DynamicalSystem
) -> float:
    """Worst residual norm over the record's grid (closed-loop protocol)."""
    return float(np.max(residual_norms(sys_true, predictor, record)))


def score_dataset(
    dataset: TrainingDataset, predictor: Optional[UncertaintyPredictor], sys_true: DynamicalSystem
) -> Array:
    return np.array(
        [nonconformity_score(e.record, predictor, sys_true) for e in dataset.entries]
    )


def two_step_calibrate(
    cal_dataset: TrainingDataset,
    predictor: Optional[UncertaintyPredictor],
    sys_true: DynamicalSystem,
    alpha: float,
    split_fraction: float = 0.5,
    second_stage_records: Optional[TrainingDataset] = None,
) -> tuple[CalibrationResult, CalibrationResult]:
    """Two-step calibration for constraint-tightened planning.

    The first subset's quantile sizes the tube radius used for tightening.
    The second quantile restores the tracking guarantee after the
    tightening shifts the data-generating process: pass the records
    regenerated under the tightened planner as ``second_stage_records``
    (without them the second half of ``cal_dataset`` is used as-is, which
    is only exact when no tightening is applied).
    """
    if not (0.0 < split_fraction < 1.0):
        raise ValueError("split_fraction must be in (0, 1)")
    n = len(cal_dataset)
    n1 = int(round(split_fraction * n))
    first = cal_dataset.entries[:n1]
    second = (
        second_stage_records.entries if second_stage_records is not None else cal_dataset.entries[n1:]
    )
    if len(first) == 0 or len(second) == 0:
        raise InsufficientCalibrationData(
            f"two-step split needs both halves non-empty, got {len(first)}/{len(second)}"
        )
    s1 = [nonconformity_score(e.record, predictor, sys_true) for e in first]
    s2 = [nonconformity_score(e.record, predictor, sys_true) for e in second]
    tube_q = calibrate(s1, alpha, {"step": "tube-radius", "n": len(s1)})
    track_q = calibrate(s2, alpha, {"step": "tracking", "n": len(s2)})
    return tube_q, track_q
