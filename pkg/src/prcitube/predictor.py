"""Uncertainty predictors and the trajectory datasets they train on.

The predictor maps (x, u) to an estimate of the additive uncertainty.
Three families: "zero" (no compensation baseline), "linear_features"
(polynomial features, solved by least squares on per-timestep errors) and
"mlp" (tanh network trained in plain NumPy by mini-batch gradient descent
with step halving, fully deterministic given the seed).

The trained objective is the per-record worst-case error

    mean_k  sup_t || zeta_t - zeta_hat(x_t, u_t) ||

which is non-smooth, so the mlp trains on a softmax-weighted surrogate
(temperature tau) and the true sup-loss is reported alongside.

Dataset construction follows the tracking protocol: the training split is
generated by replaying the reference input signals open loop on the
perturbed plant; the calibration split runs the full compensated
closed-loop policy.  That asymmetry is deliberate and load-bearing: the
predictor trains on open-loop data but deploys in closed loop, and the
induced distribution shift is absorbed by the calibration step, not by
training.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .control import ContractingPolicy
from .errors import DimensionMismatch, NonFiniteLoss, NonFiniteState
from .metric import ContractionMetric
from .systems import DynamicalSystem, PiecewiseLinearInput, TrajectoryRecord, integrate

Array = np.ndarray
log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetEntry:
    entry_id: str
    record: TrajectoryRecord
    policy: PiecewiseLinearInput
    reference: Optional[TrajectoryRecord] = None


@dataclass(frozen=True, eq=False)
class TrainingDataset:
    """A list of trajectory records with their reference input policies.

    split_tag is one of "ref", "train", "cal", "test".  Records in "train"
    and "cal" splits carry a complete realized-uncertainty sequence.
    """

    entries: tuple
    split_tag: str

    def __post_init__(self):
        if self.split_tag in ("train", "cal"):
            for e in self.entries:
                if e.record.uncertainties is None:
                    raise ValueError(f"{e.entry_id}: uncertainties missing in {self.split_tag} split")

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.entry_id for e in self.entries]


def generate_reference_dataset(
    sys_nominal: DynamicalSystem,
    initial_conditions: Sequence[Array],
    reference_policies: Sequence[PiecewiseLinearInput],
    T: float,
    dt: float,
    id_prefix: str = "ref",
) -> TrainingDataset:
    """Integrate the nominal plant once per (x0, input signal) pair.

    Diverging records are skipped and logged, not fatal.
    """
    if sys_nominal.uncertainty is not None:
        raise ValueError("reference dataset must be generated on the nominal plant")
    entries = []
    for i, (x0, pol) in enumerate(zip(initial_conditions, reference_policies)):
        eid = f"{id_prefix}-{i:04d}"
        try:
            rec = integrate(sys_nominal, x0, pol, T, dt)
        except NonFiniteState as err:
            log.warning("skipping %s: %s", eid, err)
            continue
        entries.append(DatasetEntry(eid, rec, pol))
    return TrainingDataset(tuple(entries), "ref")


def split_reference(
    dataset: TrainingDataset, n_train: int, n_cal: int
) -> tuple[TrainingDataset, TrainingDataset]:
    """Disjoint (train, cal) reference subsets, by position."""
    if n_train + n_cal > len(dataset):
        raise ValueError("not enough reference records to split")
    train = TrainingDataset(dataset.entries[:n_train], "ref")
    cal = TrainingDataset(dataset.entries[n_train : n_train + n_cal], "ref")
    return train, cal


def generate_perturbed_dataset(
    sys_true: DynamicalSystem,
    source: TrainingDataset,
    policy_mode: str,
    split_tag: str,
    metric: Optional[ContractionMetric] = None,
    predictor: Optional["UncertaintyPredictor"] = None,
    segments: int = 16,
) -> TrainingDataset:
    """Run the perturbed plant over a reference subset.

    policy_mode "open_loop_reference" replays the stored input signal
    (training protocol); "closed_loop_with_predictor" tracks the stored
    reference with the compensated policy (calibration protocol) and
    requires a metric and a trained predictor.
    """
    if sys_true.uncertainty is None:
        raise ValueError("perturbed dataset needs a plant with uncertainty")
    if policy_mode not in ("open_loop_reference", "closed_loop_with_predictor"):
        raise ValueError(f"unknown policy_mode {policy_mode!r}")
    closed = policy_mode == "closed_loop_with_predictor"
    if closed and (metric is None or predictor is None):
        raise ValueError("closed-loop mode requires a metric and a trained predictor")
    entries = []
    for e in source.entries:
        ref = e.record
        x0 = ref.states[0]
        T, dt = ref.horizon, ref.dt
        if closed:
            policy = ContractingPolicy(
                metric, sys_true.nominal, ref, predictor=predictor, segments=segments
            )
        else:
            policy = e.policy
        try:
            rec = integrate(sys_true, x0, policy, T, dt)
        except NonFiniteState as err:
            log.warning("skipping %s: %s", e.entry_id, err)
            continue
        entries.append(DatasetEntry(e.entry_id, rec, e.policy, reference=ref))
    return TrainingDataset(tuple(entries), split_tag)


# ---------------------------------------------------------------------------
# Predictor families
# ---------------------------------------------------------------------------

def polynomial_terms(n_inputs: int, degree: int) -> list[tuple[int, ...]]:
    """Exponent tuples of all monomials with total degree <= degree,
    bias first, deterministic order."""
    terms = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_inputs), d):
            e = [0] * n_inputs
            for k in combo:
                e[k] += 1
            terms.append(tuple(e))
    return terms


def _poly_features(terms, xu: Array) -> Array:
    out = np.empty(len(terms))
    for i, expo in enumerate(terms):
        v = 1.0
        for k, e in enumerate(expo):
            if e:
                v *= xu[k] ** e
        out[i] = v
    return out


def _poly_features_batch(terms, XU: Array) -> Array:
    out = np.ones((XU.shape[0], len(terms)))
    for i, expo in enumerate(terms):
        for k, e in enumerate(expo):
            if e:
                out[:, i] *= XU[:, k] ** e
    return out


def _mlp_shapes(layers):
    return [(layers[i + 1], layers[i]) for i in range(len(layers) - 1)]


def _unpack_mlp(theta: Array, layers) -> list[tuple[Array, Array]]:
    params = []
    pos = 0
    for out_d, in_d in _mlp_shapes(layers):
        W = theta[pos : pos + out_d * in_d].reshape(out_d, in_d)
        pos += out_d * in_d
        b = theta[pos : pos + out_d]
        pos += out_d
        params.append((W, b))
    return params


def _mlp_forward_batch(params, Z: Array) -> Array:
    for W, b in params[:-1]:
        Z = np.tanh(Z @ W.T + b)
    W, b = params[-1]
    return Z @ W.T + b


@dataclass(frozen=True, eq=False)
class UncertaintyPredictor:
    """Deterministic map (x, u) -> predicted uncertainty in R^n."""

    family: str
    theta: Array
    feature_spec: dict
    input_dims: tuple
    output_dim: int
    training_info: dict = field(default_factory=dict)

    def _clamp(self, xu: Array) -> Array:
        # trained families only evaluate inside the envelope of their
        # training inputs; polynomial features in particular explode when
        # extrapolated (the delayed-input convention feeds u = 0 at the
        # first tick, which hover-scale plants never train near)
        lo = self.feature_spec.get("input_low")
        if lo is None:
            return xu
        return np.clip(xu, np.asarray(lo), np.asarray(self.feature_spec["input_high"]))

    def predict(self, x: Array, u: Array) -> Array:
        n, m = self.input_dims
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (n,) or u.shape != (m,):
            raise DimensionMismatch(
                f"expected x:({n},) u:({m},), got x:{x.shape} u:{u.shape}"
            )
        if self.family == "zero":
            return np.zeros(self.output_dim)
        xu = self._clamp(np.concatenate([x, u]))
        if self.family == "linear_features":
            terms = self.feature_spec["terms"]
            coef = self.theta.reshape(len(terms), self.output_dim)
            return _poly_features(terms, xu) @ coef
        if self.family == "mlp":
            spec = self.feature_spec
            z = (xu - np.asarray(spec["input_shift"])) / np.asarray(spec["input_scale"])
            params = _unpack_mlp(self.theta, spec["layers"])
            raw = _mlp_forward_batch(params, z[None, :])[0]
            return raw * np.asarray(spec["output_scale"]) + np.asarray(spec["output_shift"])
        raise ValueError(f"unknown family {self.family!r}")

    def predict_batch(self, X: Array, U: Array) -> Array:
        if self.family == "zero":
            return np.zeros((X.shape[0], self.output_dim))
        XU = self._clamp(np.hstack([X, U]))
        if self.family == "linear_features":
            terms = self.feature_spec["terms"]
            coef = self.theta.reshape(len(terms), self.output_dim)
            return _poly_features_batch(terms, XU) @ coef
        spec = self.feature_spec
        Z = (XU - np.asarray(spec["input_shift"])) / np.asarray(spec["input_scale"])
        raw = _mlp_forward_batch(_unpack_mlp(self.theta, spec["layers"]), Z)
        return raw * np.asarray(spec["output_scale"]) + np.asarray(spec["output_shift"])

    def to_json_dict(self) -> dict:
        spec = dict(self.feature_spec)
        if "terms" in spec:
            spec["terms"] = [list(t) for t in spec["terms"]]
        return {
            "family": self.family,
            "theta": self.theta.tolist(),
            "feature_spec": spec,
            "input_dims": list(self.input_dims),
            "output_dim": self.output_dim,
            "training_info": self.training_info,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "UncertaintyPredictor":
        spec = dict(d["feature_spec"])
        if "terms" in spec:
            spec["terms"] = [tuple(t) for t in spec["terms"]]
        return UncertaintyPredictor(
            d["family"],
            np.array(d["theta"], dtype=float),
            spec,
            tuple(d["input_dims"]),
            d["output_dim"],
            d.get("training_info", {}),
        )


def predict(p: UncertaintyPredictor, x: Array, u: Array) -> Array:
    return p.predict(x, u)


def make_zero_predictor(n: int, m: int) -> UncertaintyPredictor:
    return UncertaintyPredictor("zero", np.zeros(0), {}, (n, m), n)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 0.3
    temperature: float = 20.0
    hidden: tuple = (32, 32)
    degree: int = 2


def sup_loss(p: UncertaintyPredictor, dataset: TrainingDataset) -> float:
    """Mean over records of the worst per-timestep prediction error."""
    vals = []
    for e in dataset.entries:
        pred = p.predict_batch(e.record.states, e.record.inputs)
        err = np.linalg.norm(e.record.uncertainties - pred, axis=1)
        vals.append(float(np.max(err)))
    return float(np.mean(vals))


def _record_arrays(dataset: TrainingDataset):
    return [
        (e.record.states, e.record.inputs, e.record.uncertainties)
        for e in dataset.entries
    ]


def _softmax_surrogate_and_grad(params, Z, target, tau, out_shift, out_scale):
    """Per-record surrogate loss and parameter gradients.

    Z is the normalized (T, F) input block; predictions are de-normalized
    with (out_shift, out_scale) before the error, so the surrogate is the
    softmax(tau)-weighted mean of true-scale per-timestep error norms.
    """
    acts = [Z]
    for W, b in params[:-1]:
        acts.append(np.tanh(acts[-1] @ W.T + b))
    W_last, b_last = params[-1]
    raw = acts[-1] @ W_last.T + b_last
    r = raw * out_scale + out_shift - target
    e = np.linalg.norm(r, axis=1)
    shifted = tau * (e - np.max(e))
    w = np.exp(shifted)
    w /= np.sum(w)
    s = float(w @ e)
    ds_de = w * (1.0 + tau * (e - s))
    safe = np.where(e > 1e-12, e, 1.0)
    G = (ds_de / safe)[:, None] * r * out_scale
    grads = []
    delta = G
    for i in range(len(params) - 1, -1, -1):
        A = acts[i]
        gW = delta.T @ A
        gb = delta.sum(axis=0)
        grads.append((gW, gb))
        if i > 0:
            delta = (delta @ params[i][0]) * (1.0 - acts[i] ** 2)
    grads.reverse()
    return s, grads


def _train_mlp(data, n, m, cfg: TrainConfig):
    layers = [n + m] + list(cfg.hidden) + [n]
    XU = np.vstack([np.hstack([X, U]) for X, U, _ in data])
    shift = XU.mean(axis=0)
    scale = np.maximum(XU.std(axis=0), 1e-8)
    ZS = np.vstack([Z for _, _, Z in data])
    out_shift = ZS.mean(axis=0)
    out_scale = np.maximum(ZS.std(axis=0), 1e-8)
    blocks = [((np.hstack([X, U]) - shift) / scale, Z) for X, U, Z in data]

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    params = []
    for out_d, in_d in _mlp_shapes(layers):
        params.append((rng.normal(0.0, np.sqrt(2.0 / in_d), (out_d, in_d)), np.zeros(out_d)))

    def surrogate(ps, Zb, tb):
        return _softmax_surrogate_and_grad(ps, Zb, tb, cfg.temperature, out_shift, out_scale)

    def full_loss(ps):
        return float(np.mean([surrogate(ps, Zb, tb)[0] for Zb, tb in blocks]))

    lr = cfg.learning_rate
    loss = full_loss(params)
    history = [loss]
    order = np.arange(len(blocks))
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        snapshot = [(W.copy(), b.copy()) for W, b in params]
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
            for idx in batch:
                Zb, tb = blocks[idx]
                s, grads = surrogate(params, Zb, tb)
                if not np.isfinite(s):
                    raise NonFiniteLoss(f"epoch {epoch}, record index {idx}")
                for a, g in zip(acc, grads):
                    a[0][...] += g[0]
                    a[1][...] += g[1]
            k = float(len(batch))
            params = [
                (W - lr * gW / k, b - lr * gb / k)
                for (W, b), (gW, gb) in zip(params, acc)
            ]
        new_loss = full_loss(params)
        if not np.isfinite(new_loss):
            raise NonFiniteLoss(f"epoch {epoch} full loss")
        if new_loss > loss:
            params = snapshot          # reject the epoch, halve the step
            lr *= 0.5
            new_loss = loss
        loss = new_loss
        history.append(loss)
        if lr < 1e-8:
            break
    theta = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])
    spec = {
        "layers": layers,
        "activation": "tanh",
        "input_shift": shift.tolist(),
        "input_scale": scale.tolist(),
        "output_shift": out_shift.tolist(),
        "output_scale": out_scale.tolist(),
    }
    info = {"seed": cfg.seed, "surrogate_history": history, "final_lr": lr}
    return theta, spec, info


def train(
    dataset: TrainingDataset, family: str, hyper: Optional[TrainConfig] = None
) -> UncertaintyPredictor:
    """Fit a predictor on the training split and report the sup-loss."""
    if dataset.split_tag != "train":
        raise ValueError("train() expects the training split")
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    cfg = hyper or TrainConfig()
    n = dataset.entries[0].record.state_dim
    m = dataset.entries[0].record.input_dim
    data = _record_arrays(dataset)

    envelope = {}
    if family != "zero":
        XU_all = np.vstack([np.hstack([X, U]) for X, U, _ in data])
        envelope = {
            "input_low": XU_all.min(axis=0).tolist(),
            "input_high": XU_all.max(axis=0).tolist(),
        }

    if family == "zero":
        p = make_zero_predictor(n, m)
    elif family == "linear_features":
        terms = polynomial_terms(n + m, cfg.degree)
        Phi = np.vstack([_poly_features_batch(terms, np.hstack([X, U])) for X, U, _ in data])
        Zs = np.vstack([Z for _, _, Z in data])
        coef, *_ = np.linalg.lstsq(Phi, Zs, rcond=1e-8)
        if not np.all(np.isfinite(coef)):
            raise NonFiniteLoss("least-squares coefficients are non-finite")
        spec = {"degree": cfg.degree, "terms": terms, **envelope}
        p = UncertaintyPredictor("linear_features", coef.ravel(), spec, (n, m), n)
    elif family == "mlp":
        theta, spec, info = _train_mlp(data, n, m, cfg)
        spec.update(envelope)
        p = UncertaintyPredictor("mlp", theta, spec, (n, m), n, info)
    else:
        raise ValueError(f"unknown family {family!r}")

    info = dict(p.training_info)
    info["sup_loss"] = sup_loss(p, dataset)
    info["n_records"] = len(dataset)
    return UncertaintyPredictor(
        p.family, p.theta, p.feature_spec, p.input_dims, p.output_dim, info
    )
