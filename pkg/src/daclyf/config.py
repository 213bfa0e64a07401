"""Run configuration: INI sections mapped onto dataclasses.

Every key has a default, unknown sections or keys are rejected, and
`to_ini` writes back the fully resolved configuration so a run can be
reproduced from its own metadata.
"""

import configparser
from dataclasses import dataclass, field, fields
import io

import numpy as np


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class PlantSection:
    wheel_mass: float = 5.0
    body_mass: float = 45.0
    wheel_inertia: float = 0.11
    body_inertia: float = 3.0
    wheel_radius: float = 0.195
    com_distance: float = 0.17
    torque_constant: float = 3.25
    back_emf: float = 0.14
    gravity: float = 9.81
    perturbation_fraction: float = 0.1
    perturbation_seed: int = 2


@dataclass
class ClfSection:
    kp: float = 1.0
    kd: float = 2.0
    # CTLE weight, row-major 2k x 2k
    q: tuple = (1.0, 0.0, 0.0, 1.0)


@dataclass
class TrajectorySection:
    amplitude: float = 0.15
    omega: float = 1.0
    ramp: float = 1.0
    horizon: float = 10.0
    dt_ctrl: float = 0.01
    dt_int: float = 0.001


@dataclass
class NominalSection:
    kp: float = 50.0
    kd: float = 5.0


@dataclass
class QpSection:
    slack_weight: float = 1e8
    smoothing_weight: float = 0.1
    # empty means lambda_min(Q)
    c3: float = None


@dataclass
class LearningSection:
    hidden: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class ScheduleSection:
    episodes: int = 20
    trust_min: float = 0.01
    # explicit per-episode trust values; overrides the sigmoid when set
    trust_values: tuple = None
    exploration_peak: float = 0.2
    exploration_plateau: int = 10
    exploration_decay: int = 10
    initial_pitch: float = 0.02
    eval_pitch: float = 0.01


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class RunConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    clf: ClfSection = field(default_factory=ClfSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    nominal: NominalSection = field(default_factory=NominalSection)
    qp: QpSection = field(default_factory=QpSection)
    learning: LearningSection = field(default_factory=LearningSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self):
        p, s, tr = self.plant, self.schedule, self.trajectory
        for f in fields(p):
            if f.name.startswith("perturbation"):
                continue
            if not getattr(p, f.name) > 0:
                raise ConfigError(f"plant.{f.name} must be positive")
        if not 0 <= p.perturbation_fraction < 1:
            raise ConfigError("plant.perturbation_fraction must lie in [0, 1)")
        _check_seed(p.perturbation_seed, "plant.perturbation_seed")
        _check_seed(self.run.seed, "run.seed")
        if not (self.clf.kp > 0 and self.clf.kd > 0):
            raise ConfigError("clf gains must be positive")
        if len(self.clf.q) != 4:
            raise ConfigError("clf.q must hold 4 entries (2 x 2, row-major)")
        Q = np.array(self.clf.q).reshape(2, 2)
        if not np.allclose(Q, Q.T) or np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) <= 0:
            raise ConfigError("clf.q must be symmetric positive definite")
        if not (tr.horizon > 0 and tr.dt_ctrl > 0 and tr.dt_int > 0):
            raise ConfigError("trajectory times must be positive")
        ratio = tr.dt_ctrl / tr.dt_int
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("trajectory.dt_ctrl must be an integer multiple of dt_int")
        if self.qp.slack_weight <= 0 or self.qp.smoothing_weight < 0:
            raise ConfigError("qp weights: slack_weight > 0, smoothing_weight >= 0")
        if self.qp.c3 is not None and self.qp.c3 <= 0:
            raise ConfigError("qp.c3 must be positive")
        ln = self.learning
        if ln.hidden < 1 or ln.batch_size < 1 or ln.epochs < 0 or ln.learning_rate <= 0:
            raise ConfigError("learning hyperparameters out of range")
        if not (0 <= ln.beta1 < 1 and 0 <= ln.beta2 < 1):
            raise ConfigError("learning betas must lie in [0, 1)")
        if s.episodes < 1:
            raise ConfigError("schedule.episodes must be at least 1")
        if s.trust_values is not None:
            w = list(s.trust_values)
            if len(w) != s.episodes:
                raise ConfigError("schedule.trust_values needs one value per episode")
            if any(not 0 <= v <= 1 for v in w) or any(b < a for a, b in zip(w, w[1:])):
                raise ConfigError("schedule.trust_values must be non-decreasing in [0, 1]")
        elif s.episodes < 2 or not 0 < s.trust_min < 0.5:
            raise ConfigError("sigmoid trust needs episodes >= 2 and 0 < trust_min < 0.5")
        if s.exploration_peak < 0 or s.exploration_plateau < 0 or s.exploration_decay < 0:
            raise ConfigError("exploration schedule must be nonnegative")
        if s.initial_pitch < 0 or not abs(s.eval_pitch) < np.pi / 2:
            raise ConfigError("initial pitch settings out of range")
        return self

    def to_ini(self):
        parser = configparser.ConfigParser()
        for section in fields(self):
            values = getattr(self, section.name)
            parser[section.name] = {f.name: _format(getattr(values, f.name)) for f in fields(values)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _check_seed(value, name):
    if not 0 <= value < 2 ** 64:
        raise ConfigError(f"{name} must be a 64-bit unsigned integer")


def _format(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value)


def _parse(raw, default, name):
    raw = raw.strip()
    try:
        if raw == "":
            return None
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, tuple) or name in ("trust_values", "q"):
            return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None


# run-metadata files append derived values under this section; it is
# skipped on load so a run directory's metadata doubles as its config
RESOLVED_SECTION = "resolved"


def parse_config(text):
    """Build a validated RunConfig from INI text."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    known = {f.name: f for f in fields(cfg)}
    for section in parser.sections():
        if section == RESOLVED_SECTION:
            continue
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        keys = {f.name: f for f in fields(target)}
        for key, raw in parser[section].items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            default = keys[key].default
            setattr(target, key, _parse(raw, default, key))
    return cfg.validate()


def load_config(path=None):
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
