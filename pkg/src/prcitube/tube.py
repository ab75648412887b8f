"""Probabilistic tracking-error tubes, constraint tightening, projections.

The tube is a fixed Riemannian radius around a reference trajectory,

    radius = sqrt(m_upper) * quantile / rate,

containing perturbed closed-loop trajectories with probability at least
1 - alpha whenever they start inside it.  The transient envelope

    (d0 - c2) e^(-rate t) + c2,   c2 = radius

bounds the tracking error pathwise.  Tightening shrinks admissible boxes by
the tube's worst-case excursion: exact per-axis ellipsoid extents for
constant metrics, the conservative Euclidean outer bound radius/sqrt(m_lower)
otherwise.  Input tightening is a sampled supremum of the feedback over
tube cross-sections (inner approximation, inflated 10%).  2D projections
marginalize the remaining coordinates with the Schur complement.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .conformal import CalibrationResult
from .control import min_norm_feedback
from .errors import SingularBlock
from .metric import ContractionMetric, riemannian_distance
from .systems import DynamicalSystem, TrajectoryRecord

Array = np.ndarray


@dataclass(frozen=True)
class IEBEnvelope:
    """Exponential tracking-error envelope (d0 - c2) e^(-rate t) + c2."""

    d0: float
    rate: float
    asymptote: float    # c2

    @property
    def c1(self) -> float:
        return abs(self.d0 - self.asymptote)


def envelope_at(e: IEBEnvelope, t: float) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    return (e.d0 - e.asymptote) * np.exp(-e.rate * t) + e.asymptote


@dataclass(frozen=True, eq=False)
class PRCITube:
    """Fixed-radius Riemannian neighborhood of a reference trajectory."""

    reference: TrajectoryRecord
    metric: ContractionMetric
    radius: float
    alpha: float
    quantile_source: str = ""

    @staticmethod
    def from_calibration(
        reference: TrajectoryRecord,
        metric: ContractionMetric,
        calibration: CalibrationResult,
        source_id: str = "",
    ) -> "PRCITube":
        radius = np.sqrt(metric.upper_bound) * calibration.quantile_value / metric.rate
        return PRCITube(reference, metric, float(radius), calibration.alpha, source_id)

    def envelope(self, d0: float) -> IEBEnvelope:
        return IEBEnvelope(float(d0), self.metric.rate, self.radius)

    def to_json_dict(self) -> dict:
        return {
            "radius": self.radius,
            "alpha": self.alpha,
            "quantile_source": self.quantile_source,
            "metric": self.metric.to_json_dict(),
            "horizon_s": self.reference.horizon,
        }


class Containment(NamedTuple):
    contained: bool
    margin: float
    distance: float


def tube_contains(tube: PRCITube, x: Array, t: float) -> Containment:
    """Membership of x in the cross-section at time t (reference linearly
    interpolated between grid points)."""
    x_ref = tube.reference.state_at(t)
    d, _ = riemannian_distance(tube.metric, np.asarray(x, dtype=float), x_ref)
    return Containment(bool(d <= tube.radius), float(tube.radius - d), float(d))


def trajectory_distances(tube: PRCITube, rollout: TrajectoryRecord) -> Array:
    """Riemannian tracking error at every rollout grid time."""
    ref = tube.reference
    same_grid = len(rollout.times) == len(ref.times) and np.allclose(
        rollout.times, ref.times, rtol=0, atol=1e-12
    )
    ref_states = (
        ref.states if same_grid else np.array([ref.state_at(t) for t in rollout.times])
    )
    if tube.metric.is_constant:
        D = rollout.states - ref_states
        M = tube.metric.constant_matrix
        return np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", D, M, D), 0.0))
    return np.array(
        [
            riemannian_distance(tube.metric, x, r)[0]
            for x, r in zip(rollout.states, ref_states)
        ]
    )


def envelope_violation(tube: PRCITube, rollout: TrajectoryRecord, slack: float = 0.05) -> float:
    """Worst excess of the tracking error over the envelope + slack*c2.

    Nonpositive means the envelope holds at every grid time.
    """
    d = trajectory_distances(tube, rollout)
    env = envelope_at_grid(tube.envelope(float(d[0])), rollout.times)
    return float(np.max(d - (env + slack * tube.radius)))


def envelope_at_grid(e: IEBEnvelope, times: Array) -> Array:
    return (e.d0 - e.asymptote) * np.exp(-e.rate * np.asarray(times)) + e.asymptote


def containment_experiment(
    tubes: Sequence[PRCITube], rollouts: Sequence[TrajectoryRecord]
) -> dict:
    """Whole-trajectory containment fraction over paired (tube, rollout).

    A rollout counts as contained only if its tracking error stays at or
    below the tube radius at every grid time.
    """
    if len(tubes) != len(rollouts):
        raise ValueError("need one tube per rollout")
    sup_d = []
    contained = 0
    for tube, roll in zip(tubes, rollouts):
        d = trajectory_distances(tube, roll)
        sup_d.append(float(np.max(d)))
        contained += bool(np.max(d) <= tube.radius)
    n = len(rollouts)
    return {
        "n_rollouts": n,
        "contained": int(contained),
        "fraction": contained / n if n else float("nan"),
        "alpha": tubes[0].alpha if n else None,
        "radius": tubes[0].radius if n else None,
        "sup_distances": sup_d,
    }


# ---------------------------------------------------------------------------
# Constraint tightening
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TightenedBox:
    box: Array          # (n, 2); meaningless when empty
    margins: Array      # per-coordinate shrink applied to both sides
    empty: bool

    def contains(self, v: Array) -> bool:
        return bool(np.all(v >= self.box[:, 0]) and np.all(v <= self.box[:, 1]))


def _shrink(box: Array, margins: Array) -> TightenedBox:
    lo = box[:, 0] + margins
    hi = box[:, 1] - margins
    return TightenedBox(np.stack([lo, hi], axis=1), margins, bool(np.any(lo > hi)))


def tighten_state_box(state_box: Array, radius: float, metric: ContractionMetric) -> TightenedBox:
    """Admissible-state box minus the tube's worst per-axis excursion.

    Constant metrics use the exact ellipsoid extents radius*sqrt((M^-1)_ii);
    state-dependent metrics fall back to the Euclidean outer bound
    radius/sqrt(m_lower) on every axis (sound, conservative).
    """
    state_box = np.asarray(state_box, dtype=float)
    n = state_box.shape[0]
    if radius == 0.0:
        return TightenedBox(state_box.copy(), np.zeros(n), False)
    if metric.is_constant:
        Minv = np.linalg.inv(metric.constant_matrix)
        margins = radius * np.sqrt(np.diag(Minv))
    else:
        margins = np.full(n, radius / np.sqrt(metric.lower_bound))
    return _shrink(state_box, margins)


def sample_metric_ball(
    metric: ContractionMetric, center: Array, radius: float, count: int, rng
) -> Array:
    """Uniform samples in {x : (x-c)^T M(c) (x-c) <= r^2}, center first."""
    n = center.size
    out = np.empty((count, n))
    out[0] = center
    if count == 1:
        return out
    M = metric.evaluate(center)
    vals, vecs = np.linalg.eigh(M)
    A = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T       # M^(-1/2)
    for i in range(1, count):
        z = rng.normal(size=n)
        z /= np.linalg.norm(z)
        r = rng.uniform() ** (1.0 / n)
        out[i] = center + radius * (A @ (r * z))
    return out


def tighten_input_box(
    input_box: Array,
    tube: PRCITube,
    metric: ContractionMetric,
    sys_nominal: DynamicalSystem,
    budget: int = 32,
    seed: int = 0,
    inflation: float = 0.10,
    max_sections: int = 20,
) -> TightenedBox:
    """Input box minus a sampled estimate of the feedback's reach.

    Estimates sup over tube cross-sections of |kappa_j(xi, x_ref)| by
    Monte-Carlo (``budget`` points per section, drawn from a nested stream
    so the estimate is monotone in the budget), inflated by ``inflation``.
    A sampled inner approximation of the exact tightened set.
    """
    input_box = np.asarray(input_box, dtype=float)
    m = input_box.shape[0]
    if not np.isfinite(tube.radius):
        return TightenedBox(input_box.copy(), np.full(m, np.inf), True)
    ref = tube.reference
    stride = max(1, len(ref.times) // max_sections)
    margins = np.zeros(m)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    for k in range(0, len(ref.times), stride):
        x_ref = ref.states[k]
        u_ref = ref.inputs[k]
        for xi in sample_metric_ball(metric, x_ref, tube.radius, budget, rng):
            kappa = min_norm_feedback(metric, sys_nominal, xi, x_ref, u_ref)
            margins = np.maximum(margins, np.abs(kappa))
    margins = margins * (1.0 + inflation)
    return _shrink(input_box, margins)


# ---------------------------------------------------------------------------
# 2D projection via Schur complement
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TubeProjection:
    """Per-time cross-section ellipses {y : (y-c)^T P (y-c) <= radius^2}."""

    coords: tuple
    times: Array
    centers: Array      # (T, 2)
    shapes: Array       # (T, 2, 2)
    radius: float

    def to_csv(self) -> str:
        i, j = self.coords
        buf = io.StringIO()
        buf.write(f"t,center_{i + 1},center_{j + 1},a11,a12,a22,radius\n")
        rows = np.column_stack(
            [
                self.times,
                self.centers,
                self.shapes[:, 0, 0],
                self.shapes[:, 0, 1],
                self.shapes[:, 1, 1],
                np.full(len(self.times), self.radius),
            ]
        )
        np.savetxt(buf, rows, fmt="%.17g", delimiter=",")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    def max_extent(self) -> float:
        """Largest Euclidean reach of any cross-section ellipse."""
        worst = 0.0
        for P in self.shapes:
            worst = max(worst, self.radius / np.sqrt(np.linalg.eigvalsh(P)[0]))
        return float(worst)


def schur_projection(M: Array, coords: tuple, rel_tol: float = 1e-12) -> Array:
    """Schur complement of the complementary block, restricted to coords."""
    n = M.shape[0]
    i, j = coords
    keep = [i, j]
    rest = [k for k in range(n) if k not in keep]
    if not rest:
        return M[np.ix_(keep, keep)]
    Mcc = M[np.ix_(rest, rest)]
    eig = np.linalg.eigvalsh(Mcc)
    if eig[0] <= rel_tol * max(float(np.max(np.abs(M))), 1e-300):
        raise SingularBlock("complementary metric block is singular")
    Mpp = M[np.ix_(keep, keep)]
    Mpc = M[np.ix_(keep, rest)]
    return Mpp - Mpc @ np.linalg.solve(Mcc, Mpc.T)


def project_tube_2d(tube: PRCITube, coords: tuple) -> TubeProjection:
    """Project the tube onto a coordinate plane, metric frozen at the
    reference point of each cross-section."""
    i, j = coords
    ref = tube.reference
    centers = ref.states[:, [i, j]]
    if tube.metric.is_constant:
        P = schur_projection(tube.metric.constant_matrix, coords)
        shapes = np.broadcast_to(P, (len(ref.times), 2, 2)).copy()
    else:
        shapes = np.array(
            [schur_projection(tube.metric.evaluate(x), coords) for x in ref.states]
        )
    return TubeProjection((i, j), ref.times.copy(), centers, shapes, tube.radius)
