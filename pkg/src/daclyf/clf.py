"""Quadratic CLF on pitch tracking errors, plus the feedback-linearizing controller behind it.

All control-side quantities are computed against an *estimated* model. The
true-model variants exist only to build ground-truth residuals for tests and
evaluation.
"""

from dataclasses import dataclass
import math

import numpy as np

from .numerics import is_positive_definite, solve_ctle, sym_eig_bounds

GAIN_COND_TOL = 1e-8


class RelativeDegreeError(ValueError):
    """The decoupling matrix lost full row rank at the queried configuration."""


@dataclass(frozen=True)
class SmoothSine:
    """theta_d(t) = amplitude sin(omega t) s(t) with a C2 smooth-start window.

    s ramps from 0 to 1 over [0, ramp] as the quintic 10 tau^3 - 15 tau^4 + 6 tau^5,
    so the reference and its first two derivatives start at zero.
    """

    amplitude: float = 0.15
    omega: float = 1.0
    ramp: float = 1.0

    def window(self, t):
        if t <= 0:
            return 0.0, 0.0, 0.0
        if t >= self.ramp:
            return 1.0, 0.0, 0.0
        tau = t / self.ramp
        s = tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)
        ds = 30 * tau ** 2 * (1 - tau) ** 2 / self.ramp
        dds = 60 * tau * (1 - tau) * (1 - 2 * tau) / self.ramp ** 2
        return s, ds, dds

    def __call__(self, t):
        """Return (y_d, y_d', y_d'') as length-1 arrays."""
        s, ds, dds = self.window(t)
        a, w = self.amplitude, self.omega
        sn, cs = math.sin(w * t), math.cos(w * t)
        y = a * sn * s
        yd = a * (w * cs * s + sn * ds)
        ydd = a * (-w * w * sn * s + 2 * w * cs * ds + sn * dds)
        return np.array([y]), np.array([yd]), np.array([ydd])


@dataclass(frozen=True)
class TrackingProblem:
    """Outputs y(q) with relative degree two and a desired output trajectory.

    output_rate_jacobian(q, qd) is the partial of y' = (dy/dq) qd with respect
    to q. desired(t) returns (y_d, y_d', y_d'').
    """

    k: int
    output: object
    output_jacobian: object
    output_rate_jacobian: object
    desired: object
    t0: float = 0.0
    tf: float = 10.0

    def rdot(self, t):
        _, yd_dot, yd_ddot = self.desired(t)
        return np.concatenate([yd_dot, yd_ddot])


def segway_pitch_tracking(trajectory=None, t0=0.0, tf=10.0):
    """Track the Segway pitch angle, y = theta."""
    trajectory = trajectory or SmoothSine()
    jac = np.array([[0.0, 1.0]])
    zero = np.zeros((1, 2))
    return TrackingProblem(
        k=1,
        output=lambda q: np.array([q[1]]),
        output_jacobian=lambda q: jac,
        output_rate_jacobian=lambda q, qd: zero,
        desired=trajectory,
        t0=t0,
        tf=tf,
    )


def error_state(tp, q, qd, t):
    """eta = (y(q) - y_d(t), y'(q, qd) - y_d'(t))."""
    y_d, yd_dot, _ = tp.desired(t)
    y = tp.output(q)
    y_dot = tp.output_jacobian(q) @ qd
    return np.concatenate([y - y_d, y_dot - yd_dot])


class CLF:
    """Quadratic CLF V(eta) = eta^T P eta from the CTLE of the linearized output dynamics.

    Inputs:
    Proportional gain, K_p: numpy array (k, k), symmetric positive definite
    Derivative gain, K_d: numpy array (k, k), symmetric positive definite
    CTLE weight, Q: numpy array (2k, 2k), symmetric positive definite
    """

    def __init__(self, K_p, K_d, Q=None):
        K_p = np.atleast_2d(np.asarray(K_p, dtype=float))
        K_d = np.atleast_2d(np.asarray(K_d, dtype=float))
        k = K_p.shape[0]
        Q = np.identity(2 * k) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
        for name, M in (("K_p", K_p), ("K_d", K_d), ("Q", Q)):
            if not np.allclose(M, M.T, atol=1e-12, rtol=0) or not is_positive_definite(M):
                raise ValueError(f"{name} must be symmetric positive definite")
        if Q.shape != (2 * k, 2 * k) or K_d.shape != (k, k):
            raise ValueError("gain and weight dimensions disagree")

        self.k = k
        self.K_p, self.K_d, self.Q = K_p, K_d, Q
        self.K = np.hstack([K_p, K_d])
        self.F = np.block([[np.zeros((k, k)), np.identity(k)], [np.zeros((k, k)), np.zeros((k, k))]])
        self.G = np.vstack([np.zeros((k, k)), np.identity(k)])
        self.A_cl = self.F - self.G @ self.K
        self.P = solve_ctle(self.A_cl, Q)
        if not is_positive_definite(self.P):
            raise ValueError("CTLE solution is not positive definite; closed loop is not Hurwitz")
        self.c1, self.c2 = sym_eig_bounds(self.P)
        self.c3 = sym_eig_bounds(Q)[0]

    @property
    def decay_rate(self):
        """Exponential rate of V guaranteed by V' <= -c3 |eta|^2."""
        return self.c3 / self.c2


def lyap_value(clf, eta):
    eta = np.asarray(eta, dtype=float)
    return float(eta @ clf.P @ eta)


def lyap_gradient(clf, eta):
    return 2 * clf.P @ np.asarray(eta, dtype=float)


def output_maps(model, tp, q, qd):
    """Return (f_tilde, g_tilde) for the output second derivative y'' = f_tilde + g_tilde u."""
    D = model.inertia(q)
    J = tp.output_jacobian(q)
    sol = np.linalg.solve(D, np.column_stack([model.drift(q, qd), model.actuation]))
    f_tilde = tp.output_rate_jacobian(q, qd) @ qd - J @ sol[:, 0]
    g_tilde = J @ sol[:, 1:]
    return f_tilde, g_tilde


def stacked_maps(model, tp, q, qd):
    """Return (f, g) with eta' = f - r' + g u."""
    f_tilde, g_tilde = output_maps(model, tp, q, qd)
    k, m = g_tilde.shape
    f = np.concatenate([tp.output_jacobian(q) @ qd, f_tilde])
    g = np.vstack([np.zeros((k, m)), g_tilde])
    return f, g


def pseudo_inverse_apply(g_tilde, v):
    """g_tilde^+ v for a full-row-rank k x m matrix via the normal equations."""
    k, m = g_tilde.shape
    if k == 1 and m == 1:
        if abs(g_tilde[0, 0]) <= GAIN_COND_TOL:
            raise RelativeDegreeError(f"decoupling gain {g_tilde[0, 0]:.3e} below {GAIN_COND_TOL}")
        return v / g_tilde[0, 0]
    gram = g_tilde @ g_tilde.T
    if sym_eig_bounds((gram + gram.T) / 2)[0] <= GAIN_COND_TOL ** 2:
        raise RelativeDegreeError("decoupling matrix is rank deficient")
    return g_tilde.T @ np.linalg.solve(gram, v)


def io_lin_controller(model, tp, clf):
    """Feedback linearizing controller with auxiliary input nu = -K eta."""

    def controller(q, qd, t):
        f_tilde, g_tilde = output_maps(model, tp, q, qd)
        eta = error_state(tp, q, qd, t)
        _, _, yd_ddot = tp.desired(t)
        return pseudo_inverse_apply(g_tilde, -f_tilde + yd_ddot - clf.K @ eta)

    return controller


def vdot_affine(model, tp, clf):
    """Affine decomposition of the model-based V' at (q, qd, t).

    Returns a function giving (drift, input_coeff) with
    V'(eta, u) = drift + input_coeff @ u.
    """

    def decomposition(q, qd, t):
        eta = error_state(tp, q, qd, t)
        grad = lyap_gradient(clf, eta)
        f, g = stacked_maps(model, tp, q, qd)
        return float(grad @ (f - tp.rdot(t))), grad @ g

    return decomposition


def true_residuals(model_true, model_est, tp, clf):
    """Exact residuals (a, b) of V' between the true and estimated models.

    V'_true(eta, u) = V'_est(eta, u) + a @ u + b. Only usable where the true
    model is known, i.e. as a test or evaluation oracle.
    """

    def residuals(q, qd, t):
        eta = error_state(tp, q, qd, t)
        grad = lyap_gradient(clf, eta)
        f_true, g_true = stacked_maps(model_true, tp, q, qd)
        f_est, g_est = stacked_maps(model_est, tp, q, qd)
        return grad @ (g_true - g_est), float(grad @ (f_true - f_est))

    return residuals
