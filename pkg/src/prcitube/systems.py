"""Perturbed control-affine plants and fixed-step simulation.

Systems have the form

    xdot = f(x) + B(x) u + zeta(x, u)

with drift f, actuation B (full column rank on the admissible box) and an
optional additive uncertainty zeta.  Two benchmarks are provided: a 3D
nonlinear system with parametric uncertainty and input-matrix mismatch, and
a planar VTOL aircraft with a thrust-channel disturbance.

Simulation is classical fixed-step RK4.  Feedback policies are sampled at
every RK4 stage; policies that carry sampled-and-held internal state (the
delayed input of the compensated controller) are notified once per grid
step through the optional ``notify_step`` hook.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteState

Array = np.ndarray

# Divergence guard: magnitudes beyond this are treated as non-finite even
# before overflow produces an actual inf.
_BLOWUP_LIMIT = 1e12


def _readonly(a) -> Array:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class DynamicalSystem:
    """Control-affine plant ``xdot = f(x) + B(x) u + zeta(x, u)``.

    ``uncertainty`` is None for nominal plants.  ``state_box`` and
    ``input_box`` are (n, 2) / (m, 2) arrays of per-coordinate bounds.
    """

    state_dim: int
    input_dim: int
    drift: Callable[[Array], Array]
    actuation: Callable[[Array], Array]
    state_box: Array
    input_box: Array
    uncertainty: Optional[Callable[[Array, Array], Array]] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "state_box", _readonly(self.state_box))
        object.__setattr__(self, "input_box", _readonly(self.input_box))
        if self.state_box.shape != (self.state_dim, 2):
            raise ValueError("state_box must be (n, 2)")
        if self.input_box.shape != (self.input_dim, 2):
            raise ValueError("input_box must be (m, 2)")

    def dynamics(self, x: Array, u: Array) -> Array:
        dx = self.drift(x) + self.actuation(x) @ u
        if self.uncertainty is not None:
            dx = dx + self.uncertainty(x, u)
        return dx

    @property
    def nominal(self) -> "DynamicalSystem":
        """The same plant with the uncertainty removed."""
        if self.uncertainty is None:
            return self
        return replace(self, uncertainty=None, name=self.name + "-nominal")


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """Time-indexed samples of state, input and realized uncertainty.

    All sequences share the length of ``times``; the grid is uniform.
    ``uncertainties`` is None for reference (nominal) records.
    ``left_state_box`` flags that some committed state left the admissible
    box during simulation (recorded, not an error).
    """

    times: Array
    states: Array
    inputs: Array
    uncertainties: Optional[Array] = None
    left_state_box: bool = False

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "states", _readonly(self.states))
        object.__setattr__(self, "inputs", _readonly(self.inputs))
        if self.uncertainties is not None:
            object.__setattr__(self, "uncertainties", _readonly(self.uncertainties))
        k = len(self.times)
        if self.states.shape[0] != k or self.inputs.shape[0] != k:
            raise ValueError("states/inputs length must match times")
        if self.uncertainties is not None and self.uncertainties.shape[0] != k:
            raise ValueError("uncertainties length must match times")
        if k >= 2:
            steps = np.diff(self.times)
            if np.any(np.abs(steps - steps[0]) > 1e-12 * max(abs(steps[0]), 1e-300)):
                raise ValueError("time grid is not uniform")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def _interp(self, table: Array, t: float) -> Array:
        tt = self.times
        if t < tt[0] - 1e-9 or t > tt[-1] + 1e-9:
            raise ValueError(f"t={t:.6g} outside record horizon [0, {tt[-1]:.6g}]")
        t = min(max(t, tt[0]), tt[-1])
        pos = (t - tt[0]) / self.dt
        i = min(int(pos), len(tt) - 2) if len(tt) > 1 else 0
        if len(tt) == 1:
            return table[0]
        w = pos - i
        return (1.0 - w) * table[i] + w * table[i + 1]

    def state_at(self, t: float) -> Array:
        """Reference state at time t, linear interpolation between grid points."""
        return self._interp(self.states, t)

    def input_at(self, t: float) -> Array:
        return self._interp(self.inputs, t)

    # -- serialization -----------------------------------------------------

    def csv_header(self) -> str:
        n, m = self.state_dim, self.input_dim
        cols = ["t"]
        cols += [f"x_{i + 1}" for i in range(n)]
        cols += [f"u_{j + 1}" for j in range(m)]
        if self.uncertainties is not None:
            cols += [f"zeta_{i + 1}" for i in range(n)]
        return ",".join(cols)

    def to_csv(self) -> str:
        blocks = [self.times[:, None], self.states, self.inputs]
        if self.uncertainties is not None:
            blocks.append(self.uncertainties)
        table = np.hstack(blocks)
        buf = io.StringIO()
        buf.write(self.csv_header() + "\n")
        np.savetxt(buf, table, fmt="%.17g", delimiter=",")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @staticmethod
    def from_csv(text: str) -> "TrajectoryRecord":
        lines = text.strip().splitlines()
        header = lines[0].split(",")
        n = sum(1 for c in header if c.startswith("x_"))
        m = sum(1 for c in header if c.startswith("u_"))
        has_zeta = any(c.startswith("zeta_") for c in header)
        table = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        times = table[:, 0]
        states = table[:, 1 : 1 + n]
        inputs = table[:, 1 + n : 1 + n + m]
        zeta = table[:, 1 + n + m : 1 + 2 * n + m] if has_zeta else None
        return TrajectoryRecord(times, states, inputs, zeta)

    @staticmethod
    def load_csv(path) -> "TrajectoryRecord":
        with open(path) as fh:
            return TrajectoryRecord.from_csv(fh.read())

    def envelope(self, benchmark: str = "") -> dict:
        """JSON envelope with the system metadata for this record."""
        return {
            "benchmark": benchmark,
            "state_dim": self.state_dim,
            "input_dim": self.input_dim,
            "dt_s": self.dt if len(self.times) > 1 else 0.0,
            "horizon_s": self.horizon,
            "samples": int(len(self.times)),
            "has_uncertainty": self.uncertainties is not None,
            "left_state_box": bool(self.left_state_box),
        }

    def save_envelope(self, path, benchmark: str = "") -> None:
        with open(path, "w") as fh:
            json.dump(self.envelope(benchmark), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True, eq=False)
class PiecewiseLinearInput:
    """Open-loop input signal, linear between knots, held beyond the last."""

    knot_times: Array
    knot_values: Array      # (n_knots, m)

    def __post_init__(self):
        object.__setattr__(self, "knot_times", _readonly(self.knot_times))
        object.__setattr__(self, "knot_values", _readonly(np.atleast_2d(self.knot_values)))

    def __call__(self, x: Array, t: float) -> Array:
        tt = self.knot_times
        if t <= tt[0]:
            return self.knot_values[0]
        if t >= tt[-1]:
            return self.knot_values[-1]
        i = int(np.searchsorted(tt, t, side="right")) - 1
        w = (t - tt[i]) / (tt[i + 1] - tt[i])
        return (1.0 - w) * self.knot_values[i] + w * self.knot_values[i + 1]

    def to_json_dict(self) -> dict:
        return {
            "knot_times": self.knot_times.tolist(),
            "knot_values": self.knot_values.tolist(),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "PiecewiseLinearInput":
        return PiecewiseLinearInput(np.array(d["knot_times"]), np.array(d["knot_values"]))


def _in_box(x: Array, box: Array) -> bool:
    return bool(np.all(x >= box[:, 0]) and np.all(x <= box[:, 1]))


def integrate(
    sys: DynamicalSystem,
    x0: Array,
    policy: Callable[[Array, float], Array],
    T: float,
    dt: float,
) -> TrajectoryRecord:
    """Simulate the closed loop with classical fixed-step RK4.

    The policy is evaluated at every RK4 stage.  If the policy object has a
    ``notify_step(x, t)`` method it is called once at the start of each grid
    step (and at the final grid point), before the stage evaluations; this
    is how sampled-and-held controller state advances.

    Raises NonFiniteState as soon as a committed state goes NaN/inf.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if T < dt:
        raise ValueError("T must be at least dt")
    n_steps = int(round(T / dt))
    x0 = np.asarray(x0, dtype=float)

    notify = getattr(policy, "notify_step", None)

    def rhs(x, t):
        u = policy(x, t)
        dx = sys.drift(x) + sys.actuation(x) @ u
        if sys.uncertainty is not None:
            dx = dx + sys.uncertainty(x, u)
        return dx, u

    times = np.arange(n_steps + 1) * dt
    states = np.empty((n_steps + 1, sys.state_dim))
    inputs = np.empty((n_steps + 1, sys.input_dim))
    zetas = np.empty((n_steps + 1, sys.state_dim)) if sys.uncertainty is not None else None

    x = x0.copy()
    left_box = not _in_box(x, sys.state_box)
    for k in range(n_steps + 1):
        t = times[k]
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > _BLOWUP_LIMIT:
            raise NonFiniteState(t, x)
        if notify is not None:
            notify(x, t)
        states[k] = x
        k1, u_k = rhs(x, t)
        inputs[k] = u_k
        if zetas is not None:
            zetas[k] = sys.uncertainty(x, u_k)
        left_box = left_box or not _in_box(x, sys.state_box)
        if k == n_steps:
            break
        k2, _ = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3, _ = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4, _ = rhs(x + dt * k3, t + dt)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return TrajectoryRecord(times, states, inputs, zetas, left_state_box=left_box)


# ---------------------------------------------------------------------------
# 3D benchmark: parametric uncertainty plus input-matrix mismatch
# ---------------------------------------------------------------------------

_B3_NOMINAL = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
_B3_TRUE = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.5]])


def _field3(theta1, theta2, theta3, B):
    """xdot = [x3 - th1 x1, x1^2 - x2, tanh x2] + B (u - phi(x)) as (drift, phi)."""

    def phi(x):
        q = theta3 * x[0] ** 2
        return np.array([theta2 * x[2] + q, theta2 * x[1] + q])

    def drift(x):
        base = np.array([x[2] - theta1 * x[0], x[0] ** 2 - x[1], np.tanh(x[1])])
        return base - B @ phi(x)

    return drift, phi


def make_benchmark_3d(
    theta=(0.4, 0.2, 0.1),
    delta=(0.0, 0.02, -0.01),
    true_actuation=None,
) -> tuple[DynamicalSystem, DynamicalSystem]:
    """The 3D benchmark pair (nominal, true).

    The true plant carries the perturbed parameters theta + delta and a
    mismatched input matrix (pass ``true_actuation=_B3_NOMINAL`` for the
    matched case); it is returned in the additive nominal form,
    zeta(x, u) = f_true(x, u) - f_nom(x, u).
    """
    th = np.asarray(theta, dtype=float)
    dth = th + np.asarray(delta, dtype=float)
    B_true = _B3_TRUE if true_actuation is None else np.asarray(true_actuation, dtype=float)

    drift_nom, _ = _field3(*th, _B3_NOMINAL)
    drift_true, phi_true = _field3(*dth, B_true)

    def zeta(x, u):
        f_true = drift_true(x) + B_true @ u
        f_nom = drift_nom(x) + _B3_NOMINAL @ u
        return f_true - f_nom

    state_box = np.array([[-15.0, 15.0]] * 3)
    input_box = np.array([[-1.5, 1.5]] * 2)

    nominal = DynamicalSystem(
        3, 2, drift_nom, lambda x: _B3_NOMINAL, state_box, input_box, name="threeD-nominal"
    )
    true = DynamicalSystem(
        3, 2, drift_nom, lambda x: _B3_NOMINAL, state_box, input_box,
        uncertainty=zeta, name="threeD-true",
    )
    return nominal, true


def make_benchmark_3d_direct(
    theta=(0.4, 0.2, 0.1), delta=(0.0, 0.02, -0.01)
) -> DynamicalSystem:
    """The true 3D plant in its own control-affine coordinates (not the
    additive nominal form); used to cross-check the additive rewrite."""
    dth = np.asarray(theta, dtype=float) + np.asarray(delta, dtype=float)
    drift_true, _ = _field3(*dth, _B3_TRUE)
    state_box = np.array([[-15.0, 15.0]] * 3)
    input_box = np.array([[-1.5, 1.5]] * 2)
    return DynamicalSystem(
        3, 2, drift_true, lambda x: _B3_TRUE, state_box, input_box, name="threeD-direct"
    )


# ---------------------------------------------------------------------------
# Planar VTOL benchmark
# ---------------------------------------------------------------------------

VTOL_MASS = 0.486       # kg
VTOL_INERTIA = 0.00383  # kg m^2
VTOL_GRAVITY = 9.81     # m/s^2
VTOL_ARM = 0.25         # m
VTOL_KZ = 0.04
VTOL_KPHIDOT = 0.05

_B_VTOL = np.array(
    [
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [1.0 / VTOL_MASS, 1.0 / VTOL_MASS],
        [VTOL_ARM / VTOL_INERTIA, -VTOL_ARM / VTOL_INERTIA],
    ]
)


def vtol_drift(x: Array) -> Array:
    """State x = [p_x, p_z, phi, v_x, v_z, phidot]; velocities body-fixed."""
    _, _, phi, vx, vz, phidot = x
    g = VTOL_GRAVITY
    return np.array(
        [
            vx * np.cos(phi) - vz * np.sin(phi),
            vx * np.sin(phi) + vz * np.cos(phi),
            phidot,
            vz * phidot - g * np.sin(phi),
            -vx * phidot - g * np.cos(phi),
            0.0,
        ]
    )


def vtol_thrust_disturbance(x: Array, u: Array) -> Array:
    """Disturbance entering through the two thrust channels,
    [-k_z ||v|| + k_phidot ||u||,  k_phidot ||u||]."""
    v = np.hypot(x[3], x[4])
    un = np.linalg.norm(u)
    return np.array([-VTOL_KZ * v + VTOL_KPHIDOT * un, VTOL_KPHIDOT * un])


def make_benchmark_vtol() -> DynamicalSystem:
    """Planar VTOL with the thrust-channel disturbance (the true plant).
    Use ``.nominal`` for the unperturbed twin."""

    def zeta(x, u):
        return _B_VTOL @ vtol_thrust_disturbance(x, u)

    # Published benchmark bounds: phi, phidot within +-60 deg(/s),
    # v_x in [-2,2], v_z in [-1,1]; positions are free in the dynamics,
    # bounded here so planners have a box to tighten.
    rad60 = np.deg2rad(60.0)
    state_box = np.array(
        [
            [-10.0, 10.0],
            [-10.0, 10.0],
            [-rad60, rad60],
            [-2.0, 2.0],
            [-1.0, 1.0],
            [-rad60, rad60],
        ]
    )
    hover = VTOL_MASS * VTOL_GRAVITY / 2.0
    input_box = np.array([[0.0, 4.0 * hover], [0.0, 4.0 * hover]])
    return DynamicalSystem(
        6, 2, vtol_drift, lambda x: _B_VTOL, state_box, input_box,
        uncertainty=zeta, name="vtol",
    )
