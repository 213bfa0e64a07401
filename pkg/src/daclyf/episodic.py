"""Episodic dataset aggregation for learning the CLF derivative.

Each episode runs the current controller with exploration noise on the true
plant, aggregates the samples, refits the residual model against the fixed
model-based V' estimate, and blends the resulting augmenting controller
into the nominal one with a trust weight.
"""

import csv
from dataclasses import dataclass, field
import logging
import math
import os

import numpy as np

from .clf import CLF, SmoothSine, error_state, lyap_value, segway_pitch_tracking, true_residuals, vdot_affine
from .controllers import AugmentationConfig, AugmentingController, pd_controller
from .dynamics import SegwayParams, perturb_params, segway_model, simulate, write_trajectory_csv
from .learning import Dataset, ResidualEstimator, TrainingConfig, TrainingError, fit_erm, make_dataset
from .numerics import RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrustSchedule:
    """Logistic trust ramp from w_min at episode 1 to 1 - w_min at episode T."""

    episodes: int
    w_min: float = 0.01

    def __post_init__(self):
        if self.episodes < 2:
            raise ValueError("sigmoid trust needs at least 2 episodes")
        if not 0 < self.w_min < 0.5:
            raise ValueError("w_min must lie in (0, 0.5)")

    @property
    def w_max(self):
        return 1 - self.w_min

    @property
    def steepness(self):
        return 2 * math.log((1 - self.w_min) / self.w_min) / (self.episodes - 1)


def trust(k, sched):
    if not 1 <= k <= sched.episodes:
        raise ValueError(f"episode {k} outside 1..{sched.episodes}")
    return 1 / (1 + math.exp(-sched.steepness * (k - (sched.episodes + 1) / 2)))


@dataclass(frozen=True)
class ExplorationSchedule:
    """Constant amplitude for `plateau` episodes, then linear decay to 0 over `decay` episodes."""

    peak: float = 0.2
    plateau: int = 10
    decay: int = 10


def exploration_amplitude(k, sched):
    if k <= sched.plateau:
        return sched.peak
    if sched.decay <= 0:
        return 0.0
    return sched.peak * max(0.0, 1 - (k - sched.plateau) / sched.decay)


class Perturbed:
    """u = u_base + eps, eps_i ~ U[-amp |u_base|, amp |u_base|] i.i.d. per call."""

    def __init__(self, controller, amplitude, rng):
        if amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        self.controller = controller
        self.amplitude = amplitude
        self.rng = rng

    @property
    def diagnostics(self):
        return getattr(self.controller, "diagnostics", None)

    def __call__(self, q, qd, t):
        u = np.atleast_1d(np.asarray(self.controller(q, qd, t), dtype=float))
        if self.amplitude == 0:
            return u
        width = self.amplitude * float(np.linalg.norm(u))
        return u + self.rng.uniform(-width, width, size=u.shape)


def perturbed(controller, amplitude, rng):
    return Perturbed(controller, amplitude, rng)


def _reset(controller):
    inner = getattr(controller, "controller", None)
    if inner is not None:
        _reset(inner)
    if hasattr(controller, "reset"):
        controller.reset()


def run_experiment(controller, plant, x0, tp, clf, horizon, dt_ctrl=0.01, dt_int=1e-3, episode=0):
    """One rollout from (q0, 0) plus its dataset. Divergent prefixes are kept."""
    _reset(controller)
    traj = simulate(plant, controller, x0, tp.t0, tp.t0 + horizon, dt_ctrl, dt_int)
    if len(traj) >= 3:
        data = make_dataset(traj, tp, clf, episode)
    else:
        data = Dataset.empty(plant.n, tp.k, plant.m)
    return traj, data


@dataclass
class Metrics:
    ise: float
    max_err: float
    diverged: bool

    def beats(self, other):
        return not self.diverged and (other.diverged or self.ise < other.ise)


def tracking_metrics(traj, tp):
    """ISE of y - y_d (trapezoid over ticks) and the peak error."""
    err = np.array([error_state(tp, q, qd, t)[:tp.k] for q, qd, t in zip(traj.q, traj.qd, traj.times)])
    sq = np.sum(err ** 2, axis=1)
    ise = float(np.sum((sq[1:] + sq[:-1]) / 2 * np.diff(traj.times))) if len(sq) > 1 else 0.0
    return Metrics(ise, float(np.max(np.abs(err))), bool(traj.diverged))


def evaluate(controller, plant, tp, x0, horizon, dt_ctrl=0.01, dt_int=1e-3):
    """Noise-free rollout; returns (Metrics, trajectory)."""
    _reset(controller)
    traj = simulate(plant, controller, x0, tp.t0, tp.t0 + horizon, dt_ctrl, dt_int)
    return tracking_metrics(traj, tp), traj


@dataclass
class Setup:
    """Everything derived from a RunConfig: plants, CLF, controllers, schedules."""

    cfg: object
    nominal_params: SegwayParams
    true_params: SegwayParams
    model_est: object
    model_true: object
    tp: object
    clf: CLF
    base: object
    nominal: object
    aug_cfg: AugmentationConfig
    training: TrainingConfig
    trust_values: list
    exploration: ExplorationSchedule

    @property
    def eval_x0(self):
        return np.array([0.0, self.cfg.schedule.eval_pitch, 0.0, 0.0])

    def sample_x0(self, rng):
        pitch = self.cfg.schedule.initial_pitch
        return np.array([0.0, rng.uniform(-pitch, pitch), 0.0, 0.0])

    def rollout_kwargs(self):
        tr = self.cfg.trajectory
        return {"dt_ctrl": tr.dt_ctrl, "dt_int": tr.dt_int}

    def augmented(self, estimator, trust_value):
        return AugmentingController(self.nominal, estimator, self.aug_cfg, self.tp, trust=trust_value)


def build_setup(cfg):
    p = cfg.plant
    nominal_params = SegwayParams(**{f: getattr(p, f) for f in SegwayParams.__dataclass_fields__})
    true_params = perturb_params(nominal_params, p.perturbation_fraction, RngStream(p.perturbation_seed).split("plant"))
    model_est = segway_model(nominal_params)
    model_true = segway_model(true_params)
    tr = cfg.trajectory
    tp = segway_pitch_tracking(SmoothSine(tr.amplitude, tr.omega, tr.ramp), 0.0, tr.horizon)
    clf = CLF([[cfg.clf.kp]], [[cfg.clf.kd]], np.array(cfg.clf.q).reshape(2, 2))
    c3 = clf.c3 if cfg.qp.c3 is None else cfg.qp.c3
    s = cfg.schedule
    if s.trust_values is not None:
        weights = list(s.trust_values)
    else:
        sched = TrustSchedule(s.episodes, s.trust_min)
        weights = [trust(k, sched) for k in range(1, s.episodes + 1)]
    ln = cfg.learning
    return Setup(
        cfg=cfg,
        nominal_params=nominal_params,
        true_params=true_params,
        model_est=model_est,
        model_true=model_true,
        tp=tp,
        clf=clf,
        base=vdot_affine(model_est, tp, clf),
        nominal=pd_controller(cfg.nominal.kp, cfg.nominal.kd, tp),
        aug_cfg=AugmentationConfig(c3, cfg.qp.slack_weight, cfg.qp.smoothing_weight),
        training=TrainingConfig(ln.hidden, ln.learning_rate, ln.batch_size, ln.epochs, (ln.beta1, ln.beta2)),
        trust_values=weights,
        exploration=ExplorationSchedule(s.exploration_peak, s.exploration_plateau, s.exploration_decay),
    )


@dataclass
class EpisodeRecord:
    episode: int
    trust: float
    exploration: float
    initial_pitch: float
    experiment: object  # StateTrajectory
    evaluation: object  # StateTrajectory
    metrics: Metrics
    dataset_size: int
    samples: int
    train_loss: float
    estimator: ResidualEstimator


@dataclass
class RunRecord:
    setup: Setup
    seed: int
    baseline: Metrics
    baseline_traj: object
    episodes: list = field(default_factory=list)
    dataset: Dataset = None

    @property
    def final_estimator(self):
        return self.episodes[-1].estimator if self.episodes else None

    def final_controller(self):
        if not self.episodes:
            return self.setup.nominal
        last = self.episodes[-1]
        return self.setup.augmented(last.estimator, last.trust)


class DaclyfError(RuntimeError):
    """A learning run stopped early; `record` holds the completed episodes."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


def run_daclyf(cfg, seed=None, progress=None):
    """Run the episodic loop and return a RunRecord.

    The augmenting controller is always built around the fixed nominal
    controller, and every ERM fit measures residuals against the same
    model-based V' estimate.
    """
    setup = build_setup(cfg)
    seed = cfg.run.seed if seed is None else seed
    root = RngStream(seed)
    kw = setup.rollout_kwargs()
    horizon = cfg.trajectory.horizon

    baseline, baseline_traj = evaluate(setup.nominal, setup.model_true, setup.tp, setup.eval_x0, horizon, **kw)
    record = RunRecord(setup=setup, seed=seed, baseline=baseline, baseline_traj=baseline_traj)
    data = Dataset.empty(setup.model_true.n, setup.tp.k, setup.model_true.m)
    controller = setup.nominal

    for k in range(1, len(setup.trust_values) + 1):
        rng = root.split(f"episode-{k}")
        x0 = setup.sample_x0(rng.split("initial"))
        amp = exploration_amplitude(k, setup.exploration)
        noisy = perturbed(controller, amp, rng.split("exploration"))
        traj, fresh = run_experiment(noisy, setup.model_true, x0, setup.tp, setup.clf, horizon, episode=k, **kw)
        fresh.attach_base(setup.base)
        data = data.extend(fresh)
        if len(data) == 0:
            raise DaclyfError(f"episode {k}: no data collected", record)
        try:
            estimator, history = fit_erm(data, setup.base, setup.tp, setup.clf, setup.training, rng.split("erm"))
        except TrainingError as exc:
            raise DaclyfError(f"episode {k}: {exc}", record) from exc
        w = setup.trust_values[k - 1]
        controller = setup.augmented(estimator, w)
        metrics, eval_traj = evaluate(controller, setup.model_true, setup.tp, setup.eval_x0, horizon, **kw)
        record.episodes.append(EpisodeRecord(
            episode=k, trust=w, exploration=amp, initial_pitch=float(x0[1]),
            experiment=traj, evaluation=eval_traj, metrics=metrics,
            dataset_size=len(data), samples=len(fresh), train_loss=history.final_loss, estimator=estimator,
        ))
        record.dataset = data
        log.info("episode %d: trust %.3f explore %.3f ise %.4g (pd %.4g) loss %.3e",
                 k, w, amp, metrics.ise, baseline.ise, history.final_loss)
        if progress is not None:
            progress(record.episodes[-1], record)
    return record


def derivative_errors(estimator, setup, traj):
    """Mean |W' - V'_true| and mean |V'_est - V'_true| over a trajectory's held inputs.

    V'_true comes from the exact residual oracle on the true model.
    """
    oracle = true_residuals(setup.model_true, setup.model_est, setup.tp, setup.clf)
    learned, model_based = [], []
    for q, qd, t, u in zip(traj.q, traj.qd, traj.times, traj.inputs):
        drift, coeff = setup.base(q, qd, t)
        v_est = drift + float(coeff @ u)
        a, b = oracle(q, qd, t)
        v_true = v_est + float(a @ u) + b
        learned.append(abs(estimator.predict(q, qd, t, u) - v_true))
        model_based.append(abs(v_est - v_true))
    return float(np.mean(learned)), float(np.mean(model_based))


METRICS_COLUMNS = ["episode", "trust", "exploration", "ise", "max_err", "diverged", "dataset_size", "train_loss"]
STUDY_COLUMNS = ["episode", "instances", "ise_min", "ise_mean", "ise_max"]


def lyapunov_trace(traj, tp, clf, decomposition):
    """V at every recorded state and the estimated V' at every held input."""
    V = np.array([lyap_value(clf, error_state(tp, q, qd, t)) for q, qd, t in zip(traj.q, traj.qd, traj.times)])
    vdot = []
    for q, qd, t, u in zip(traj.q, traj.qd, traj.times, traj.inputs):
        drift, coeff = decomposition(q, qd, t)
        vdot.append(drift + float(np.atleast_1d(coeff) @ u))
    return V, np.array(vdot)


def write_trace(path, traj, setup, decomposition):
    V, vdot = lyapunov_trace(traj, setup.tp, setup.clf, decomposition)
    write_trajectory_csv(path, traj, V, vdot)


def metrics_rows(record):
    rows = []
    for e in record.episodes:
        rows.append([
            str(e.episode), repr(float(e.trust)), repr(float(e.exploration)), repr(e.metrics.ise),
            repr(e.metrics.max_err), str(int(e.metrics.diverged)), str(e.dataset_size), repr(float(e.train_loss)),
        ])
    return rows


def write_metrics_csv(path, record):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(metrics_rows(record))


def run_metadata(record, status="complete"):
    """Resolved configuration plus the derived quantities a rerun would need."""
    setup = record.setup
    lines = [setup.cfg.to_ini().rstrip("\n"), "", "[resolved]"]
    lines.append(f"status = {status}")
    lines.append(f"seed = {record.seed}")
    for name, value in setup.true_params.as_dict().items():
        lines.append(f"true_{name} = {value!r}")
    lines.append(f"c1 = {setup.clf.c1!r}")
    lines.append(f"c2 = {setup.clf.c2!r}")
    lines.append(f"c3 = {setup.aug_cfg.c3!r}")
    lines.append("trust = " + ", ".join(repr(float(w)) for w in setup.trust_values))
    lines.append("optimizer = adam, mean squared error, he initialization, best epoch kept")
    lines.append(f"baseline_ise = {record.baseline.ise!r}")
    lines.append(f"episodes_completed = {len(record.episodes)}")
    return "\n".join(lines) + "\n"


def save_record(record, out, status="complete"):
    """Persist a RunRecord as a directory and return the metrics CSV path."""
    os.makedirs(out, exist_ok=True)
    setup = record.setup
    with open(os.path.join(out, "run-metadata.ini"), "w") as fh:
        fh.write(run_metadata(record, status))
    write_trace(os.path.join(out, "baseline.csv"), record.baseline_traj, setup, setup.base)
    for e in record.episodes:
        write_trace(os.path.join(out, f"episode-{e.episode:02d}-experiment.csv"), e.experiment, setup,
                    e.estimator.decomposition)
        write_trace(os.path.join(out, f"episode-{e.episode:02d}-evaluation.csv"), e.evaluation, setup,
                    e.estimator.decomposition)
    if record.final_estimator is not None:
        with open(os.path.join(out, "estimator.bin"), "wb") as fh:
            fh.write(record.final_estimator.to_bytes())
    path = os.path.join(out, "metrics.csv")
    write_metrics_csv(path, record)
    return path


def load_estimator(path, setup):
    with open(path, "rb") as fh:
        return ResidualEstimator.from_bytes(fh.read(), setup.base, setup.tp, setup.clf)


def study_envelope(instance_ises):
    """Per-episode (count, min, mean, max) ISE.

    instance_ises holds one list per instance, episode k at index k - 1;
    instances that stopped early simply contribute fewer episodes.
    """
    by_episode = {}
    for ises in instance_ises:
        for k, value in enumerate(ises, start=1):
            by_episode.setdefault(k, []).append(value)
    rows = []
    for k in sorted(by_episode):
        v = np.array(by_episode[k])
        rows.append((k, len(v), float(v.min()), float(v.mean()), float(v.max())))
    return rows


def write_study_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STUDY_COLUMNS)
        for k, n, lo, mean, hi in rows:
            writer.writerow([str(k), str(n), repr(lo), repr(mean), repr(hi)])


__all__ = [
    "TrustSchedule", "trust", "ExplorationSchedule", "exploration_amplitude", "perturbed",
    "run_experiment", "evaluate", "tracking_metrics", "Metrics", "build_setup", "run_daclyf",
    "RunRecord", "EpisodeRecord", "DaclyfError", "derivative_errors", "save_record", "load_estimator",
    "study_envelope", "write_study_csv", "write_metrics_csv", "lyapunov_trace",
]
