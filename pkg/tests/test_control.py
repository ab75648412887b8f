import numpy as np
import pytest

from prcitube.control import (
    ContractingPolicy,
    closed_loop_input,
    feedback_terms,
    min_norm_feedback,
    residual_trace,
)
from prcitube.errors import DegenerateConstraint
from prcitube.metric import ContractionMetric
from prcitube.predictor import make_zero_predictor
from prcitube.systems import DynamicalSystem, PiecewiseLinearInput, integrate


def kkt_qp(a, b):
    """Independent one-constraint QP: active-set with a dense KKT solve."""
    m = a.size
    if b <= 0.0:
        return np.zeros(m)
    K = np.zeros((m + 1, m + 1))
    K[:m, :m] = 2.0 * np.eye(m)
    K[:m, m] = -a
    K[m, :m] = a
    rhs = np.zeros(m + 1)
    rhs[m] = b
    sol = np.linalg.solve(K, rhs)
    return sol[:m]


def scalar_tracking_setup(rate):
    sys = DynamicalSystem(
        1,
        1,
        drift=lambda x: -x,
        actuation=lambda x: np.eye(1),
        state_box=np.array([[-5.0, 5.0]]),
        input_box=np.array([[-50.0, 50.0]]),
    )
    metric = ContractionMetric.constant(np.eye(1), rate=rate)
    return sys, metric


def test_kappa_zero_at_reference():
    sys, metric = scalar_tracking_setup(0.5)
    k = min_norm_feedback(metric, sys, np.array([0.7]), np.array([0.7]), np.array([0.1]))
    np.testing.assert_array_equal(k, np.zeros(1))


def test_kappa_zero_when_naturally_contracting():
    sys, metric = scalar_tracking_setup(0.5)   # true rate is 1 > 0.5
    k = min_norm_feedback(metric, sys, np.array([1.0]), np.array([0.2]), np.array([0.0]))
    np.testing.assert_array_equal(k, np.zeros(1))


def test_kappa_active_scalar_closed_form():
    sys, metric = scalar_tracking_setup(1.5)   # demands more than the drift gives
    e = 0.8
    k = min_norm_feedback(metric, sys, np.array([e]), np.array([0.0]), np.array([0.0]))
    assert k[0] == pytest.approx(-0.5 * e, abs=1e-12)


def random_instance(rng):
    n, m = 3, 2
    A = rng.normal(size=(n, n))
    M = A @ A.T + 0.5 * np.eye(n)
    metric = ContractionMetric.constant(M, rate=float(rng.uniform(0.2, 2.0)))
    Adyn = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    sys = DynamicalSystem(
        n,
        m,
        drift=lambda x, Adyn=Adyn: Adyn @ x,
        actuation=lambda x, B=B: B,
        state_box=np.array([[-10.0, 10.0]] * n),
        input_box=np.array([[-100.0, 100.0]] * m),
    )
    x = rng.normal(size=n)
    x_ref = rng.normal(size=n)
    u_ref = rng.normal(size=m)
    return metric, sys, x, x_ref, u_ref


def test_qp_matches_kkt_oracle():
    rng = np.random.default_rng(11)
    active = 0
    for _ in range(200):
        metric, sys, x, x_ref, u_ref = random_instance(rng)
        terms = feedback_terms(metric, sys, x, x_ref, u_ref)
        a, b = terms.a, terms.b
        kappa = min_norm_feedback(metric, sys, x, x_ref, u_ref)
        oracle = kkt_qp(a, b)
        np.testing.assert_allclose(kappa, oracle, atol=1e-8)
        active += b > 0
    assert 20 < active < 180    # the mix covers both branches


def test_qp_constraint_satisfied_with_margin():
    rng = np.random.default_rng(12)
    for _ in range(100):
        metric, sys, x, x_ref, u_ref = random_instance(rng)
        terms = feedback_terms(metric, sys, x, x_ref, u_ref)
        a, b = terms.a, terms.b
        kappa = min_norm_feedback(metric, sys, x, x_ref, u_ref)
        assert a @ kappa - b >= -1e-8


def test_qp_optimality_against_feasible_points():
    rng = np.random.default_rng(13)
    metric, sys, x, x_ref, u_ref = random_instance(rng)
    terms = feedback_terms(metric, sys, x, x_ref, u_ref)
    a, b = terms.a, terms.b
    while b <= 0:   # want an active instance
        metric, sys, x, x_ref, u_ref = random_instance(rng)
        terms = feedback_terms(metric, sys, x, x_ref, u_ref)
        a, b = terms.a, terms.b
    kappa = min_norm_feedback(metric, sys, x, x_ref, u_ref)
    base = (b / (a @ a)) * a
    for _ in range(100):
        w = rng.normal(size=a.size)
        w -= (w @ a) / (a @ a) * a          # orthogonal wander
        slack = abs(rng.normal()) * (a / np.linalg.norm(a))
        other = base + 0.5 * w + slack
        assert a @ other >= b - 1e-10
        assert np.linalg.norm(kappa) <= np.linalg.norm(other) + 1e-12


def test_degenerate_constraint_raises():
    sys = DynamicalSystem(
        1,
        1,
        drift=lambda x: x,                  # expanding, uncontrollable
        actuation=lambda x: np.zeros((1, 1)),
        state_box=np.array([[-5.0, 5.0]]),
        input_box=np.array([[-5.0, 5.0]]),
    )
    metric = ContractionMetric.constant(np.eye(1), rate=0.5)
    with pytest.raises(DegenerateConstraint):
        min_norm_feedback(metric, sys, np.array([1.0]), np.array([0.0]), np.array([0.0]))


# ---------------------------------------------------------------------------
# Closed-loop policy
# ---------------------------------------------------------------------------

def make_reference(sys, x0, T=1.0, dt=0.01, knots=None):
    pol = knots or PiecewiseLinearInput(np.array([0.0, T]), np.zeros((2, sys.input_dim)))
    return integrate(sys, x0, pol, T, dt)


def test_zero_predictor_equals_no_predictor():
    sys, metric = scalar_tracking_setup(0.5)
    ref = make_reference(sys, np.array([1.0]))
    x = np.array([0.4])
    plain = ContractingPolicy(metric, sys, ref)
    zeroed = ContractingPolicy(metric, sys, ref, predictor=make_zero_predictor(1, 1))
    np.testing.assert_array_equal(plain(x, 0.25), zeroed(x, 0.25))


def test_full_compensation_with_square_B():
    # fully actuated plant, predictor equal to the true uncertainty
    def zeta(x, u):
        return np.array([0.3 * np.tanh(x[0]), -0.2])

    sys_true = DynamicalSystem(
        2,
        2,
        drift=lambda x: -x,
        actuation=lambda x: np.eye(2),
        state_box=np.array([[-5.0, 5.0]] * 2),
        input_box=np.array([[-10.0, 10.0]] * 2),
        uncertainty=zeta,
    )

    class Perfect:
        family = "oracle"

        def predict(self, x, u):
            return zeta(x, u)

    metric = ContractionMetric.constant(np.eye(2), rate=0.5)
    ref = make_reference(sys_true.nominal, np.array([0.5, -0.5]))
    policy = ContractingPolicy(metric, sys_true.nominal, ref, predictor=Perfect())
    roll = integrate(sys_true, np.array([0.5, -0.5]), policy, 1.0, 0.01)
    norms = residual_trace(sys_true, policy, roll)
    # u_minus lags one tick, so the first step compensates zeta(x, 0) != zeta(x, u);
    # here zeta does not depend on u, so cancellation is exact everywhere.
    assert np.max(norms) < 1e-12


def test_residual_trace_matches_pointwise_recomputation(vtol, metric_vtol):
    nom = vtol.nominal
    from prcitube.systems import VTOL_GRAVITY, VTOL_MASS

    hover = VTOL_MASS * VTOL_GRAVITY / 2.0
    knots = PiecewiseLinearInput(
        np.array([0.0, 1.0]), np.tile([hover, hover], (2, 1))
    )
    ref = integrate(nom, np.zeros(6), knots, 1.0, 0.01)

    class Half:
        family = "half"

        def predict(self, x, u):
            return 0.5 * vtol.uncertainty(x, u)

    policy = ContractingPolicy(metric_vtol, nom, ref, predictor=Half())
    roll = integrate(vtol, np.zeros(6), policy, 1.0, 0.01)
    norms = residual_trace(vtol, policy, roll)
    B = nom.actuation(np.zeros(6))
    Bp = np.linalg.pinv(B, rcond=1e-10)
    for k in (0, 7, 50, 100):
        u_minus = roll.inputs[k - 1] if k else np.zeros(2)
        r = vtol.uncertainty(roll.states[k], roll.inputs[k]) - B @ (
            Bp @ (0.5 * vtol.uncertainty(roll.states[k], u_minus))
        )
        assert norms[k] == pytest.approx(np.linalg.norm(r), abs=1e-12)


def test_delayed_input_ladder():
    sys, metric = scalar_tracking_setup(0.8)
    ref = make_reference(sys, np.array([1.0]), T=0.1, dt=0.01)
    policy = ContractingPolicy(metric, sys, ref)
    dt = 0.01
    x = np.array([0.5])
    policy.notify_step(x, 0.0)
    u0 = policy.boundary_inputs[0]
    np.testing.assert_array_equal(policy.delayed_input(0.0), np.zeros(1))
    np.testing.assert_array_equal(policy.delayed_input(0.5 * dt), np.zeros(1))
    np.testing.assert_array_equal(policy.delayed_input(dt), u0)
    x1 = np.array([0.45])
    policy.notify_step(x1, dt)
    u1 = policy.boundary_inputs[1]
    np.testing.assert_array_equal(policy.delayed_input(dt), u0)
    np.testing.assert_array_equal(policy.delayed_input(1.5 * dt), u0)
    np.testing.assert_array_equal(policy.delayed_input(2 * dt), u1)


def test_boundary_inputs_match_stored_record():
    sys, metric = scalar_tracking_setup(0.8)
    ref = make_reference(sys, np.array([1.0]), T=0.2, dt=0.01)
    policy = ContractingPolicy(metric, sys, ref)
    roll = integrate(sys, np.array([0.7]), policy, 0.2, 0.01)
    assert len(policy.boundary_inputs) == len(roll.times)
    np.testing.assert_array_equal(np.array(policy.boundary_inputs), roll.inputs)


def test_closed_loop_input_function_alias():
    sys, metric = scalar_tracking_setup(0.5)
    ref = make_reference(sys, np.array([1.0]))
    policy = ContractingPolicy(metric, sys, ref)
    x = np.array([0.3])
    np.testing.assert_array_equal(closed_loop_input(policy, x, 0.1), policy(x, 0.1))


def test_nominal_contraction_rate(bench3d, metric3d):
    nom, _ = bench3d
    rng = np.random.default_rng(5)
    lam = metric3d.rate
    T = min(3.0 / lam, 6.0)
    for _ in range(3):
        x_ref0 = rng.uniform(-0.5, 0.5, 3)
        knots = PiecewiseLinearInput(
            np.array([0.0, T / 2, T]), rng.uniform(-0.3, 0.3, (3, 2))
        )
        ref = integrate(nom, x_ref0, knots, T, 0.01)
        x0 = x_ref0 + rng.uniform(-0.3, 0.3, 3)
        policy = ContractingPolicy(metric3d, nom, ref)
        roll = integrate(nom, x0, policy, T, 0.01)
        M = metric3d.constant_matrix
        D = roll.states - ref.states
        d = np.sqrt(np.einsum("ki,ij,kj->k", D, M, D))
        d0 = d[0]
        bound = d0 * np.exp(-lam * roll.times) * 1.05 + 1e-12
        assert np.all(d <= bound)


def test_saturation_logged_not_applied_by_default():
    sys, metric = scalar_tracking_setup(1.5)
    tight = DynamicalSystem(
        1,
        1,
        drift=sys.drift,
        actuation=sys.actuation,
        state_box=sys.state_box,
        input_box=np.array([[-1e-4, 1e-4]]),
    )
    ref = make_reference(tight, np.array([1.0]))
    policy = ContractingPolicy(metric, tight, ref)
    u = policy(np.array([3.0]), 0.0)
    assert len(policy.saturation_events) == 1
    assert abs(u[0]) > 1e-4                       # not clipped
    clipped = ContractingPolicy(metric, tight, ref, saturate=True)
    uc = clipped(np.array([3.0]), 0.0)
    assert abs(uc[0]) <= 1e-4 + 1e-15


def test_qp_matches_scipy_slsqp_oracle():
    # second, fully independent numeric route at looser tolerance
    from scipy.optimize import minimize

    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(50):
        metric, sys, x, x_ref, u_ref = random_instance(rng)
        terms = feedback_terms(metric, sys, x, x_ref, u_ref)
        if terms.b <= 0:
            continue
        kappa = min_norm_feedback(metric, sys, x, x_ref, u_ref)
        res = minimize(
            lambda k: float(k @ k),
            x0=np.zeros(terms.a.size),
            jac=lambda k: 2.0 * k,
            constraints=[{"type": "ineq", "fun": lambda k: float(terms.a @ k - terms.b),
                          "jac": lambda k: terms.a}],
            method="SLSQP",
            options={"ftol": 1e-12, "maxiter": 200},
        )
        assert res.success
        np.testing.assert_allclose(kappa, res.x, atol=1e-6)
        checked += 1
    assert checked >= 20


def test_policy_config_serializes():
    import json

    sys, metric = scalar_tracking_setup(0.5)
    ref = make_reference(sys, np.array([1.0]))
    policy = ContractingPolicy(metric, sys, ref, predictor=make_zero_predictor(1, 1))
    cfg = policy.config_dict()
    text = json.dumps(cfg, sort_keys=True)
    back = json.loads(text)
    assert back["dt_s"] == ref.dt
    assert back["saturate"] is False
    assert back["predictor"] == "zero"
    assert back["metric"]["parameterization"] == "constant"
