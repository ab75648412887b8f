"""Experiment orchestration: configs, persistence, the staged pipeline.

A pipeline run is a sequence of stages, each persisting its artifacts under
the output directory and loading them back instead of recomputing when they
already exist (delete downstream artifacts to regenerate exactly those).
All randomness flows through named counter-based streams derived from the
config seed, so records can be generated in any order (or in parallel)
without changing results, and identical configs produce byte-identical
reports.

Config files are a flat key = value text format (TOML-compatible subset):
ints, floats, booleans, quoted strings and JSON-style lists; '#' comments.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import conformal, tube as tube_mod
from .control import ContractingPolicy
from .errors import NonFiniteState, PrcitubeError
from .metric import ContractionMetric, box_grid, synthesize_constant_metric, verify_contraction
from .planner import ObstacleEllipse, PlanProblem, end_to_end_run, plan as solve_plan
from .predictor import (
    PiecewiseLinearInput,
    TrainConfig,
    TrainingDataset,
    DatasetEntry,
    UncertaintyPredictor,
    generate_perturbed_dataset,
    generate_reference_dataset,
    split_reference,
    train,
)
from .systems import DynamicalSystem, TrajectoryRecord, make_benchmark_3d, make_benchmark_vtol
from .tube import PRCITube, project_tube_2d, tighten_input_box, tighten_state_box

log = logging.getLogger(__name__)

PIPELINE_STAGES = ("metric", "gen-data", "train", "calibrate", "tube", "plan", "evaluate")


# ---------------------------------------------------------------------------
# Named deterministic streams
# ---------------------------------------------------------------------------

def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Philox stream keyed by (seed, crc32(name)): stable across runs and
    independent across names."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((int(seed), zlib.crc32(name.encode()))))
    )


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def parse_flat_config(text: str) -> dict:
    """Parse the flat key = value format; values are JSON fragments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str = "threeD"
    seed: int = 0
    n_train: int = 100
    n_cal: int = 50
    n_test: int = 100
    horizon_s: float = 5.0
    dt_s: float = 0.01
    alpha: float = 0.05
    # dataset samplers
    init_box: Optional[list] = None         # flat [lo1, hi1, lo2, hi2, ...]
    reference_sampler: str = "spline"       # spline | waypoint_pd (vtol)
    input_knot_amp: float = 0.4
    input_knot_center: Optional[list] = None
    input_knot_trim_start: bool = False     # pin the first knot to the trim input
    knot_spacing_s: float = 1.0
    waypoint_box: Optional[list] = None     # flat (p_x, p_z) bounds for waypoint_pd
    # predictor
    predictor_family: str = "mlp"
    predictor_epochs: int = 80
    predictor_hidden: list = field(default_factory=lambda: [32, 32])
    predictor_degree: int = 2
    predictor_lr: float = 0.05
    predictor_temperature: float = 20.0
    predictor_batch: int = 16
    # metric
    metric_source: str = "synthesize"       # or a path to a metric JSON
    lambda_lo: float = 0.3
    lambda_hi: float = 1.0
    metric_grid_points: int = 5
    metric_margin: float = -0.05
    metric_chi_max: float = 100.0
    metric_box: Optional[list] = None       # certificate region, flat [lo,hi,...]
    # tube / projection
    projection_coords: list = field(default_factory=lambda: [0, 1])
    start_mode: str = "center"              # test-rollout starts: center | ball
    # planner scenario (optional)
    plan_enabled: bool = False
    plan_start: Optional[list] = None
    plan_goal: Optional[list] = None
    plan_w1: float = 0.1
    plan_w2: float = 1.0
    plan_goal_weights: Optional[list] = None
    plan_obstacles: list = field(default_factory=list)   # flat [cx,cy,q11,q12,q22] each
    plan_max_iter: int = 120
    two_step: bool = False
    two_step_fraction: float = 0.5
    tighten_budget: int = 32
    # misc
    workers: int = 1
    out_dir: str = "runs/experiment"

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**d)

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(parse_flat_config(fh.read()))

    def to_dict(self) -> dict:
        return asdict(self)


def benchmark_systems(config: ExperimentConfig) -> tuple[DynamicalSystem, DynamicalSystem]:
    if config.benchmark == "threeD":
        return make_benchmark_3d()
    if config.benchmark == "vtol":
        true = make_benchmark_vtol()
        return true.nominal, true
    raise ValueError(f"unknown benchmark {config.benchmark!r}")


def _default_init_box(config: ExperimentConfig, sys_nom: DynamicalSystem) -> np.ndarray:
    if config.init_box is not None:
        flat = np.asarray(config.init_box, dtype=float)
        return flat.reshape(-1, 2)
    if config.benchmark == "threeD":
        return np.array([[-1.0, 1.0]] * 3)
    # vtol: near-hover attitudes and small velocities, positions near origin
    return np.array(
        [[-0.5, 0.5], [-0.5, 0.5], [-0.1, 0.1], [-0.2, 0.2], [-0.2, 0.2], [-0.1, 0.1]]
    )


def _input_center(config: ExperimentConfig, sys_nom: DynamicalSystem) -> np.ndarray:
    if config.input_knot_center is not None:
        return np.asarray(config.input_knot_center, dtype=float)
    if config.benchmark == "vtol":
        from .systems import VTOL_GRAVITY, VTOL_MASS

        return np.full(2, VTOL_MASS * VTOL_GRAVITY / 2.0)
    return np.zeros(sys_nom.input_dim)


def sample_initial_condition(config, sys_nom, tag: str, index: int) -> np.ndarray:
    box = _default_init_box(config, sys_nom)
    rng = rng_stream(config.seed, f"{tag}-ic-{index}")
    return rng.uniform(box[:, 0], box[:, 1])


def sample_reference_policy(config, sys_nom, tag: str, index: int) -> PiecewiseLinearInput:
    if config.reference_sampler == "waypoint_pd":
        return _waypoint_pd_inputs(config, sys_nom, tag, index)
    rng = rng_stream(config.seed, f"{tag}-policy-{index}")
    n_knots = int(np.floor(config.horizon_s / config.knot_spacing_s)) + 1
    knot_times = np.arange(n_knots) * config.knot_spacing_s
    if knot_times[-1] < config.horizon_s:
        knot_times = np.append(knot_times, config.horizon_s)
    center = _input_center(config, sys_nom)
    amp = config.input_knot_amp
    values = center + rng.uniform(-amp, amp, (len(knot_times), sys_nom.input_dim))
    if config.input_knot_trim_start:
        values[0] = center
    box = sys_nom.input_box
    values = np.clip(values, box[:, 0], box[:, 1])
    return PiecewiseLinearInput(knot_times, values)


def _waypoint_pd_inputs(config, sys_nom, tag: str, index: int) -> PiecewiseLinearInput:
    """Reference input signal for attitude-unstable plants (the VTOL).

    Independent random thrust knots integrate into tumbling through the
    roll channel, so instead a hover PD law flies the nominal plant to a
    random waypoint and its recorded input sequence becomes the open-loop
    reference signal.
    """
    from .systems import VTOL_GRAVITY, VTOL_INERTIA, VTOL_MASS, VTOL_ARM, integrate as _int

    rng = rng_stream(config.seed, f"{tag}-policy-{index}")
    wbox = (
        np.asarray(config.waypoint_box, dtype=float).reshape(-1, 2)
        if config.waypoint_box is not None
        else np.array([[-1.0, 1.0], [-0.6, 0.6]])
    )
    target = rng.uniform(wbox[:, 0], wbox[:, 1])
    x0 = sample_initial_condition(config, sys_nom, tag, index)
    m, J, g, arm = VTOL_MASS, VTOL_INERTIA, VTOL_GRAVITY, VTOL_ARM

    def pd_policy(x, t):
        px, pz, phi, vx, vz, phidot = x
        # velocity-limited outer loop; accelerating +x needs negative tilt
        # (v_x dot = -g sin(phi) near hover), speeds stay inside the
        # certificate region
        vx_des = np.clip(0.8 * (target[0] - px), -0.6, 0.6)
        phi_des = np.clip(-0.5 * (vx_des - vx), -0.25, 0.25)
        thrust = m * (g + 1.2 * (target[1] - pz) - 1.6 * vz) / max(np.cos(phi), 0.5)
        torque = J * (9.0 * (phi_des - phi) - 4.0 * phidot)
        u1 = 0.5 * (thrust + torque / arm)
        u2 = 0.5 * (thrust - torque / arm)
        box = sys_nom.input_box
        return np.clip(np.array([u1, u2]), box[:, 0], box[:, 1])

    rec = _int(sys_nom, x0, pd_policy, config.horizon_s, config.dt_s)
    return PiecewiseLinearInput(rec.times, rec.inputs)


# ---------------------------------------------------------------------------
# Persistence helpers
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)    # 'inf' / '-inf' / 'nan', JSON-safe
    return obj


def write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_dataset(ds: TrainingDataset, directory, benchmark: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in ds.entries:
        csv_name = f"{e.entry_id}.csv"
        e.record.save_csv(directory / csv_name)
        entries.append(
            {
                "id": e.entry_id,
                "csv": csv_name,
                "policy": e.policy.to_json_dict(),
                "reference_id": e.entry_id if e.reference is not None else None,
                "envelope": e.record.envelope(benchmark),
            }
        )
    write_json(
        directory / "manifest.json",
        {"split_tag": ds.split_tag, "benchmark": benchmark, "entries": entries},
    )


def load_dataset(directory, reference_dir=None) -> TrainingDataset:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    entries = []
    for item in manifest["entries"]:
        record = TrajectoryRecord.load_csv(directory / item["csv"])
        policy = PiecewiseLinearInput.from_json_dict(item["policy"])
        reference = None
        if item.get("reference_id") and reference_dir is not None:
            reference = TrajectoryRecord.load_csv(Path(reference_dir) / f"{item['reference_id']}.csv")
        entries.append(DatasetEntry(item["id"], record, policy, reference))
    return TrainingDataset(tuple(entries), manifest["split_tag"])


def manifest_hash(directory) -> str:
    with open(Path(directory) / "manifest.json", "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_metric(config: ExperimentConfig, sys_nom: DynamicalSystem, out: Path):
    path = out / "metric.json"
    vpath = out / "metric_verification.json"
    if path.exists():
        metric = ContractionMetric.load(path)
    else:
        if config.metric_source == "synthesize":
            grid = _metric_grid(config, sys_nom, config.metric_grid_points)
            metric = synthesize_constant_metric(
                sys_nom,
                grid,
                (config.lambda_lo, config.lambda_hi),
                chi_max=config.metric_chi_max,
                margin_target=config.metric_margin,
            )
        else:
            metric = ContractionMetric.load(config.metric_source)
        metric.save(path)
    if not vpath.exists():
        fine = _metric_grid(config, sys_nom, 2 * config.metric_grid_points - 1)
        report = verify_contraction(metric, sys_nom, fine)
        report.save(vpath)
    report = read_json(vpath)
    return metric, report


def _metric_grid(config, sys_nom, points: int) -> np.ndarray:
    if config.metric_box is not None:
        box = np.asarray(config.metric_box, dtype=float).reshape(-1, 2)
    elif config.benchmark == "vtol":
        # No constant metric certifies the full attitude box; default to the
        # near-hover region.  Positions drop out (dynamics are invariant).
        r = float(np.deg2rad(30.0))
        box = np.array([[0, 0], [0, 0], [-r, r], [-1, 1], [-0.5, 0.5], [-r, r]])
    else:
        box = sys_nom.state_box
    per_dim = [1 if hi <= lo else points for lo, hi in box]
    return box_grid(box, per_dim)


def stage_ref_data(config, sys_nom, out: Path) -> TrainingDataset:
    directory = out / "ref_data"
    if (directory / "manifest.json").exists():
        return load_dataset(directory)
    n = config.n_train + config.n_cal
    ics = [sample_initial_condition(config, sys_nom, "ref", i) for i in range(n)]
    pols = [sample_reference_policy(config, sys_nom, "ref", i) for i in range(n)]
    ds = generate_reference_dataset(sys_nom, ics, pols, config.horizon_s, config.dt_s)
    save_dataset(ds, directory, config.benchmark)
    return ds


def stage_train_data(config, sys_true, ref_train, out: Path) -> TrainingDataset:
    directory = out / "train_data"
    if (directory / "manifest.json").exists():
        return load_dataset(directory, reference_dir=out / "ref_data")
    ds = generate_perturbed_dataset(sys_true, ref_train, "open_loop_reference", "train")
    save_dataset(ds, directory, config.benchmark)
    return ds


def stage_train(config, train_ds, out: Path) -> UncertaintyPredictor:
    path = out / "predictor.json"
    if path.exists():
        return UncertaintyPredictor.from_json_dict(read_json(path))
    cfg = TrainConfig(
        seed=config.seed,
        epochs=config.predictor_epochs,
        batch_size=config.predictor_batch,
        learning_rate=config.predictor_lr,
        temperature=config.predictor_temperature,
        hidden=tuple(config.predictor_hidden),
        degree=config.predictor_degree,
    )
    p = train(train_ds, config.predictor_family, cfg)
    write_json(path, p.to_json_dict())
    return p


def stage_cal_data(config, sys_true, ref_cal, metric, predictor, out: Path) -> TrainingDataset:
    directory = out / "cal_data"
    if (directory / "manifest.json").exists():
        return load_dataset(directory, reference_dir=out / "ref_data")
    ds = generate_perturbed_dataset(
        sys_true, ref_cal, "closed_loop_with_predictor", "cal", metric=metric, predictor=predictor
    )
    save_dataset(ds, directory, config.benchmark)
    return ds


def stage_calibrate(config, cal_ds, predictor, sys_true, out: Path) -> conformal.CalibrationResult:
    spath = out / "scores.json"
    cpath = out / "calibration.json"
    if cpath.exists():
        return conformal.CalibrationResult.from_json_dict(read_json(cpath))
    if spath.exists():
        scores = np.array(read_json(spath)["scores"], dtype=float)
    else:
        scores = conformal.score_dataset(cal_ds, predictor, sys_true)
        write_json(spath, {"scores": list(map(float, scores))})
    meta = {
        "predictor": getattr(predictor, "family", None),
        "manifest_sha256": manifest_hash(out / "cal_data"),
    }
    result = conformal.calibrate(scores, config.alpha, meta)
    write_json(cpath, result.to_json_dict())
    return result


def stage_tube(config, metric, calibration, cal_ds, out: Path) -> dict:
    path = out / "tube.json"
    csv_path = out / "tube_ellipses.csv"
    reference = cal_ds.entries[0].reference or cal_ds.entries[0].record
    t = PRCITube.from_calibration(reference, metric, calibration, source_id="calibration")
    if not path.exists():
        write_json(path, t.to_json_dict())
    if not csv_path.exists() and np.isfinite(t.radius):
        proj = project_tube_2d(t, tuple(config.projection_coords))
        proj.save_csv(csv_path)
    return {"radius": t.radius, "alpha": t.alpha}


def _parse_obstacles(config) -> tuple:
    obs = []
    for flat in config.plan_obstacles:
        cx, cy, q11, q12, q22 = flat
        obs.append(
            ObstacleEllipse(
                np.array([cx, cy]),
                np.array([[q11, q12], [q12, q22]]),
                tuple(config.projection_coords),
            )
        )
    return tuple(obs)


def stage_plan(config, sys_nom, sys_true, metric, predictor, cal_ds, out: Path) -> dict:
    """Tightened planning with the two-step calibration protocol."""
    plan_dir = out / "plan"
    report_path = plan_dir / "plan_report.json"
    if report_path.exists():
        return read_json(report_path)
    plan_dir.mkdir(parents=True, exist_ok=True)

    n = len(cal_ds)
    n1 = int(round(config.two_step_fraction * n)) if config.two_step else n
    first = TrainingDataset(cal_ds.entries[:n1], "cal")
    scores_a = conformal.score_dataset(first, predictor, sys_true)
    cal_a = conformal.calibrate(scores_a, config.alpha, {"step": "tube-radius"})
    radius_a = float(np.sqrt(metric.upper_bound) * cal_a.quantile_value / metric.rate)

    s_box = tighten_state_box(sys_nom.state_box, radius_a, metric)
    rep_ref = first.entries[0].reference or first.entries[0].record
    rep_tube = PRCITube(rep_ref, metric, radius_a, config.alpha, "tightening")
    a_box = tighten_input_box(
        sys_nom.input_box, rep_tube, metric, sys_nom,
        budget=config.tighten_budget, seed=config.seed,
    )
    if s_box.empty or a_box.empty:
        raise PrcitubeError("tightened boxes are empty; tube too large for the scenario")

    obstacles = _parse_obstacles(config)
    if obstacles and np.isfinite(radius_a):
        proj = project_tube_2d(rep_tube, tuple(config.projection_coords))
        inflate_by = proj.max_extent()
        planning_obstacles = tuple(o.inflate(inflate_by) for o in obstacles)
    else:
        planning_obstacles = obstacles

    problem = PlanProblem(
        sys=sys_nom,
        T=config.horizon_s,
        dt=config.dt_s,
        x0=np.asarray(config.plan_start, dtype=float),
        goal=np.asarray(config.plan_goal, dtype=float),
        state_box=s_box.box,
        input_box=a_box.box,
        obstacles=planning_obstacles,
        w1=config.plan_w1,
        w2=config.plan_w2,
        goal_weights=None
        if config.plan_goal_weights is None
        else np.asarray(config.plan_goal_weights, dtype=float),
    )
    init = _plan_warm_start(config, sys_nom)
    result = solve_plan(problem, init=init, max_iter=config.plan_max_iter)
    result.record.save_csv(plan_dir / "plan.csv")
    write_json(
        plan_dir / "plan_manifest.json",
        {
            "w1": config.plan_w1,
            "w2": config.plan_w2,
            "obstacles": [o.to_json_dict() for o in obstacles],
            "planning_obstacles": [o.to_json_dict() for o in planning_obstacles],
            "state_box": s_box.box,
            "input_box": a_box.box,
            "cost": result.cost,
            "iterations": len(result.cost_history),
            "converged": result.converged,
            "violations": result.violations,
        },
    )

    if config.two_step:
        # Second calibration step: same count as the held-out half,
        # regenerated under the tightened plan (ball starts), restoring
        # exchangeability with the evaluation rollouts below.
        second_entries = []
        for i in range(n - n1):
            rng = rng_stream(config.seed, f"twostep-start-{i}")
            x0 = tube_mod.sample_metric_ball(
                metric, result.record.states[0], radius_a, 2, rng
            )[1]
            policy = ContractingPolicy(metric, sys_nom, result.record, predictor=predictor)
            try:
                rec = integrate_true(sys_true, x0, policy, config.horizon_s, config.dt_s)
            except NonFiniteState as err:
                log.warning("two-step record %d diverged: %s", i, err)
                continue
            second_entries.append(
                DatasetEntry(f"twostep-{i:04d}", rec, result.input_policy(), result.record)
            )
        second_ds = TrainingDataset(tuple(second_entries), "cal")
        cal_tube, cal_track = conformal.two_step_calibrate(
            cal_ds, predictor, sys_true, config.alpha,
            split_fraction=config.two_step_fraction, second_stage_records=second_ds,
        )
    else:
        # single-step fallback: the tightening quantile doubles as the
        # tracking quantile (the Remark-1 exchangeability caveat applies)
        cal_tube = cal_track = cal_a
    write_json(plan_dir / "calibration_tube.json", cal_tube.to_json_dict())
    write_json(plan_dir / "calibration_tracking.json", cal_track.to_json_dict())

    run = end_to_end_run(
        sys_true,
        result,
        metric,
        predictor,
        cal_track,
        n_rollouts=config.n_test,
        seed=config.seed + 1,
        start_mode="ball",
        start_radius=radius_a,      # same start law as the second-step records
        obstacles=obstacles,
        state_box=sys_true.state_box,
        input_box=sys_true.input_box,
    )
    report = {
        "plan_cost": result.cost,
        "plan_converged": result.converged,
        "plan_violations": result.violations,
        "tightening_radius": radius_a,
        "tube_quantile": cal_tube.quantile_value,
        "tracking_quantile": cal_track.quantile_value,
        "state_margins": s_box.margins,
        "input_margins": a_box.margins,
        "end_to_end": {k: v for k, v in run.items() if k != "rollouts"},
    }
    write_json(report_path, report)
    return read_json(report_path)


def _plan_warm_start(config, sys_nom) -> Optional[np.ndarray]:
    n_steps = int(round(config.horizon_s / config.dt_s))
    center = _input_center(config, sys_nom)
    return np.tile(center, (n_steps + 1, 1))


def integrate_true(sys_true, x0, policy, T, dt):
    from .systems import integrate

    return integrate(sys_true, x0, policy, T, dt)


def stage_evaluate(config, sys_nom, sys_true, metric, predictor, calibration, out: Path) -> dict:
    rpath = out / "test" / "coverage.json"
    if rpath.exists():
        return read_json(rpath)
    (out / "test").mkdir(parents=True, exist_ok=True)
    tubes, rollouts, ids = [], [], []
    for i in range(config.n_test):
        x0 = sample_initial_condition(config, sys_nom, "test", i)
        pol = sample_reference_policy(config, sys_nom, "test", i)
        try:
            ref = integrate_true(sys_nom, x0, pol, config.horizon_s, config.dt_s)
        except NonFiniteState as err:
            log.warning("test reference %d diverged: %s", i, err)
            continue
        t = PRCITube.from_calibration(ref, metric, calibration, source_id="test")
        if config.start_mode == "ball" and np.isfinite(t.radius):
            rng = rng_stream(config.seed, f"test-start-{i}")
            start = tube_mod.sample_metric_ball(metric, ref.states[0], t.radius, 2, rng)[1]
        else:
            start = ref.states[0]
        policy = ContractingPolicy(metric, sys_nom, ref, predictor=predictor)
        try:
            roll = integrate_true(sys_true, start, policy, config.horizon_s, config.dt_s)
        except NonFiniteState as err:
            log.warning("test rollout %d diverged: %s", i, err)
            continue
        tubes.append(t)
        rollouts.append(roll)
        ids.append(f"test-{i:04d}")
    result = tube_mod.containment_experiment(tubes, rollouts)
    env_worst = float("-inf")
    for t, roll in zip(tubes, rollouts):
        d = tube_mod.trajectory_distances(t, roll)
        if np.max(d) <= t.radius:
            env_worst = max(env_worst, tube_mod.envelope_violation(t, roll, slack=0.05))
    result["envelope_worst_excess_contained"] = env_worst
    result["ids"] = ids
    write_json(rpath, result)
    lines = ["id,sup_distance,contained"]
    for i, s in zip(ids, result["sup_distances"]):
        lines.append(f"{i},{s:.17g},{int(s <= result['radius'])}")
    with open(out / "test" / "sup_distances.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return read_json(rpath)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def run_pipeline(config: ExperimentConfig, stop_after: str = "evaluate") -> dict:
    """Execute the staged pipeline up to ``stop_after``; returns the report.

    Stage artifacts persist under config.out_dir and are reused when
    present.  The final report.json is deterministic for a fixed config.
    """
    if stop_after not in PIPELINE_STAGES:
        raise ValueError(f"unknown stage {stop_after!r}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config.to_dict())
    sys_nom, sys_true = benchmark_systems(config)
    report: dict = {"config": config.to_dict(), "stages": []}

    def reached(stage):
        report["stages"].append(stage)
        return stage == stop_after

    metric, verification = stage_metric(config, sys_nom, out)
    report["metric"] = {
        "lambda": metric.rate,
        "m_lower": metric.lower_bound,
        "m_upper": metric.upper_bound,
        "verification_passed": verification["passed"],
    }
    if not verification["passed"]:
        report["valid"] = False
        write_json(out / "report.json", report)
        return read_json(out / "report.json")
    if reached("metric"):
        return _finish(report, out)

    ref = stage_ref_data(config, sys_nom, out)
    ref_train, ref_cal = split_reference(ref, min(config.n_train, len(ref)), min(config.n_cal, max(len(ref) - config.n_train, 0)))
    train_ds = stage_train_data(config, sys_true, ref_train, out)
    report["data"] = {
        "n_ref": len(ref),
        "n_train": len(train_ds),
        "requested_train": config.n_train,
        "requested_cal": config.n_cal,
    }
    if reached("gen-data"):
        return _finish(report, out)

    predictor = stage_train(config, train_ds, out)
    report["predictor"] = {
        "family": predictor.family,
        "sup_loss": predictor.training_info.get("sup_loss"),
        "n_records": predictor.training_info.get("n_records"),
    }
    if reached("train"):
        return _finish(report, out)

    cal_ds = stage_cal_data(config, sys_true, ref_cal, metric, predictor, out)
    calibration = stage_calibrate(config, cal_ds, predictor, sys_true, out)
    report["calibration"] = {
        "n_cal": calibration.n_scores,
        "alpha": calibration.alpha,
        "quantile_index": calibration.quantile_index,
        "quantile_value": calibration.quantile_value,
        "infinite": calibration.infinite,
    }
    if reached("calibrate"):
        return _finish(report, out)

    report["tube"] = stage_tube(config, metric, calibration, cal_ds, out)
    if reached("tube"):
        return _finish(report, out)

    if config.plan_enabled:
        report["plan"] = stage_plan(config, sys_nom, sys_true, metric, predictor, cal_ds, out)
    if reached("plan"):
        return _finish(report, out)

    coverage = stage_evaluate(config, sys_nom, sys_true, metric, predictor, calibration, out)
    report["coverage"] = {
        k: coverage[k]
        for k in (
            "n_rollouts",
            "contained",
            "fraction",
            "radius",
            "envelope_worst_excess_contained",
        )
    }
    return _finish(report, out)


def _finish(report: dict, out: Path) -> dict:
    report.setdefault("valid", True)
    write_json(out / "report.json", report)
    # Round-trip through the file so the returned dict is exactly what a
    # reader of report.json sees.
    return read_json(out / "report.json")
