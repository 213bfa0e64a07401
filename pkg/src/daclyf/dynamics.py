"""Affine robotic systems D(q) q'' + C(q, q') q' + G(q) = B u and the planar Segway.

Segway conventions: q = (x, theta) with x the wheel-axle position (m) and
theta the body pitch (rad, positive when the body leans toward +x). The
input is a single motor voltage; positive voltage drives the wheels toward
-x, so a positive voltage pitches the body toward +theta.
"""

from dataclasses import dataclass, fields, replace
import csv
import logging
import math

import numpy as np

from .numerics import DivergenceError, rk4_step

log = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e6


def christoffel_coriolis(dD, qd):
    """Coriolis matrix from Christoffel symbols of the first kind.

    Inputs:
    Inertia partials, dD: numpy array (n, n, n), dD[i, j, k] = dD_ij / dq_k
    Coordinate rates, qd: numpy array (n,)
    """
    # gamma[i, j, k] = (dD_ij/dq_k + dD_ik/dq_j - dD_jk/dq_i) / 2
    gamma = 0.5 * (dD + dD.transpose(0, 2, 1) - dD.transpose(2, 0, 1))
    return gamma @ qd


class RoboticModel:
    """One plant instance: inertia, Coriolis, gravity, static actuation.

    Velocity-dependent non-conservative forces (motor back-EMF for the
    Segway) go in `damping`; the combined drift is
    H(q, qd) = C(q, qd) qd + G(q) + damping(q, qd).
    """

    def __init__(self, inertia, inertia_grad, gravity, actuation, damping=None, name="model", accel=None):
        self.inertia = inertia
        self.inertia_grad = inertia_grad
        self.gravity = gravity
        self.actuation = np.atleast_2d(np.asarray(actuation, dtype=float))
        self.n, self.m = self.actuation.shape
        self._damping = damping
        self.name = name
        # optional closed-form q'' = accel(q, qd, u), used by simulate
        self.accel = accel

    def coriolis(self, q, qd):
        return christoffel_coriolis(self.inertia_grad(q), qd)

    def damping(self, q, qd):
        if self._damping is None:
            return np.zeros(self.n)
        return self._damping(q, qd)

    def drift(self, q, qd):
        return self.coriolis(q, qd) @ qd + self.gravity(q) + self.damping(q, qd)

    def __repr__(self):
        return f"RoboticModel({self.name!r}, n={self.n}, m={self.m})"


def forward_dynamics(model, q, qd, u):
    """q'' = D(q)^-1 (B u - H(q, qd)) via a Cholesky solve."""
    L = np.linalg.cholesky(model.inertia(q))
    rhs = model.actuation @ np.atleast_1d(u) - model.drift(q, qd)
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


@dataclass(frozen=True)
class SegwayParams:
    """Planar Segway parameters. Wheel quantities lump both wheels."""

    wheel_mass: float = 5.0  # kg
    body_mass: float = 45.0  # kg
    wheel_inertia: float = 0.11  # kg m^2, about the axle
    body_inertia: float = 3.0  # kg m^2, about the body center of mass
    wheel_radius: float = 0.195  # m
    com_distance: float = 0.17  # m, axle to body center of mass
    torque_constant: float = 3.25  # N m / V, both motors
    back_emf: float = 0.14  # V s / rad
    gravity: float = 9.81  # m / s^2

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{f.name} must be strictly positive, got {value}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def perturb_params(p, fraction, rng):
    """Scale every parameter except gravity by an independent U[1-f, 1+f] draw."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    names = [f.name for f in fields(p) if f.name != "gravity"]
    scales = rng.uniform(1 - fraction, 1 + fraction, size=len(names))
    return replace(p, **{name: getattr(p, name) * s for name, s in zip(names, scales)})


def segway_model(p, back_emf=True):
    """Planar wheeled inverted pendulum with one voltage input on both motors.

    back_emf=False drops the motor damping term, leaving a conservative
    system whose total energy is segway_energy (used in tests).
    """
    mt = p.wheel_mass + p.body_mass + p.wheel_inertia / p.wheel_radius ** 2
    ml = p.body_mass * p.com_distance
    i_theta = p.body_mass * p.com_distance ** 2 + p.body_inertia
    r = p.wheel_radius
    # motor torque acts on the wheel/body relative angle x / r - theta
    relative = np.array([1 / r, -1.0])
    B = -p.torque_constant * relative.reshape(2, 1)
    emf_gain = p.torque_constant * p.back_emf

    def inertia(q):
        c = ml * np.cos(q[1])
        return np.array([[mt, c], [c, i_theta]])

    def inertia_grad(q):
        dD = np.zeros((2, 2, 2))
        dD[0, 1, 1] = dD[1, 0, 1] = -ml * np.sin(q[1])
        return dD

    def gravity(q):
        return np.array([0.0, -ml * p.gravity * np.sin(q[1])])

    def damping(q, qd):
        return emf_gain * (qd[0] / r - qd[1]) * relative

    kt = p.torque_constant
    g = p.gravity
    emf = emf_gain if back_emf else 0.0

    def accel(q, qd, u):
        s, c = math.sin(q[1]), math.cos(q[1])
        xd, thd = qd[0], qd[1]
        u = u[0]
        rel = emf * (xd / r - thd)
        rhs0 = -kt * u / r + ml * s * thd * thd - rel / r
        rhs1 = kt * u + ml * g * s + rel
        d01 = ml * c
        det = mt * i_theta - d01 * d01
        return np.array([(i_theta * rhs0 - d01 * rhs1) / det, (mt * rhs1 - d01 * rhs0) / det])

    return RoboticModel(inertia, inertia_grad, gravity, B, damping if back_emf else None, name="segway", accel=accel)


def segway_energy(p, q, qd):
    """Kinetic plus potential energy of the Segway (potential zero at the axle)."""
    model = segway_model(p, back_emf=False)
    qd = np.asarray(qd, dtype=float)
    return 0.5 * qd @ model.inertia(q) @ qd + p.body_mass * p.gravity * p.com_distance * np.cos(q[1])


@dataclass
class StateTrajectory:
    """States at control ticks and the inputs held between them.

    states has shape (N + 1, 2n) with rows (q, qd); inputs has shape (N, m).
    `info` holds one controller diagnostics dict per input, when available.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    diverged: bool = False
    info: list = None

    @property
    def n(self):
        return self.states.shape[1] // 2

    @property
    def q(self):
        return self.states[:, :self.n]

    @property
    def qd(self):
        return self.states[:, self.n:]

    def __len__(self):
        return len(self.times)


def simulate(model, controller, x0, t0, tf, dt_ctrl=0.01, dt_int=1e-3):
    """Closed-loop rollout with a zero-order-hold controller and RK4 plant steps.

    The controller is called as controller(q, qd, t) at every control tick.
    Divergence stops the rollout (non-finite or huge states above 1e6 count,
    as does a singular inertia matrix) and returns the prefix with diverged=True.
    """
    if not tf > t0:
        raise ValueError("tf must exceed t0")
    substeps = dt_ctrl / dt_int
    if abs(substeps - round(substeps)) > 1e-9 or round(substeps) < 1:
        raise ValueError("dt_ctrl must be an integer multiple of dt_int")
    substeps = int(round(substeps))
    ticks = int(round((tf - t0) / dt_ctrl))
    n = model.n

    if model.accel is not None:
        def field(x, t, u):
            return np.concatenate([x[n:], model.accel(x[:n], x[n:], u)])
    else:
        def field(x, t, u):
            return np.concatenate([x[n:], forward_dynamics(model, x[:n], x[n:], u)])

    x = np.asarray(x0, dtype=float).copy()
    times, states, inputs, info = [t0], [x.copy()], [], []
    diverged = False
    for i in range(ticks):
        t = t0 + i * dt_ctrl
        u = np.atleast_1d(np.asarray(controller(x[:n], x[n:], t), dtype=float))
        if not np.all(np.isfinite(u)):
            diverged = True
            break
        inputs.append(u)
        diag = getattr(controller, "diagnostics", None)
        info.append(dict(diag) if diag is not None else {})
        try:
            # overflow is detected and reported as divergence below
            with np.errstate(over="ignore", invalid="ignore"):
                for j in range(substeps):
                    x = rk4_step(lambda s, tau: field(s, tau, u), x, t + j * dt_int, dt_int)
        except (DivergenceError, np.linalg.LinAlgError) as exc:
            log.info("rollout diverged at t=%.3f: %s", t, exc)
            diverged = True
        if diverged or not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_BOUND:
            diverged = True
            inputs.pop()
            info.pop()
            break
        times.append(t0 + (i + 1) * dt_ctrl)
        states.append(x.copy())

    m = model.m
    return StateTrajectory(
        times=np.array(times),
        states=np.array(states),
        inputs=np.array(inputs).reshape(-1, m),
        diverged=diverged,
        info=info,
    )


TRAJECTORY_COLUMNS = ["t", "x", "xdot", "theta", "thetadot", "u", "V", "Vdot_est", "constraint_slack", "fallback_flag"]


def write_trajectory_csv(path, traj, V=None, Vdot_est=None):
    """Write a Segway trajectory with the fixed column layout.

    The final state has no held input; its input and diagnostic fields are
    left empty.
    """
    rows = len(traj)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for i in range(rows):
            x, theta, xdot, thetadot = traj.states[i]
            held = i < len(traj.inputs)
            info = traj.info[i] if held and traj.info else {}
            writer.writerow([
                _fmt(traj.times[i]), _fmt(x), _fmt(xdot), _fmt(theta), _fmt(thetadot),
                _fmt(traj.inputs[i, 0]) if held else "",
                _fmt(V[i]) if V is not None else "",
                _fmt(Vdot_est[i]) if Vdot_est is not None and i < len(Vdot_est) else "",
                _fmt(info["constraint_slack"]) if "constraint_slack" in info else "",
                int(info.get("fallback", False)) if held else "",
            ])


def _fmt(value):
    return repr(float(value))
