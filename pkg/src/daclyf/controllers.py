"""QP solver and the PD, CLF-QP and learned augmenting controllers."""

from dataclasses import dataclass, field
import logging

import numpy as np

from .clf import error_state

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-11
DEGENERACY_TOL = 1e-14
# keeps the slack Hessian entry invertible when the CLF gradient vanishes
SLACK_CURVATURE_FLOOR = 1e-12


class QpError(ArithmeticError):
    """Numerical failure inside solve_qp."""


class InfeasibleQpError(QpError):
    """The constraint polyhedron is empty."""


@dataclass
class QpProblem:
    """min 1/2 z^T H z + g^T z + const  s.t.  A z <= b."""

    H: np.ndarray
    g: np.ndarray
    A: np.ndarray = None
    b: np.ndarray = None
    const: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(d)
        self.A = np.zeros((0, d)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, d)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).reshape(-1)
        if self.H.shape != (d, d) or self.A.shape[0] != self.b.shape[0]:
            raise ValueError("inconsistent QP dimensions")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12:
            raise ValueError("cost matrix is not symmetric")

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.g @ z + self.const)


@dataclass
class QpSolution:
    solution: np.ndarray
    active_set: list
    multipliers: np.ndarray  # one per constraint, zero when inactive
    objective: float
    iterations: int

    def __iter__(self):
        return iter((self.solution, self.active_set))


def solve_qp(problem):
    """Dual active-set solve of a small strictly convex QP.

    Starts from the unconstrained minimizer and adds violated constraints one
    at a time, dropping constraints whose multipliers would turn negative
    (Goldfarb-Idnani). The cost matrix must be positive definite. Raises
    InfeasibleQpError when a violated constraint cannot be satisfied and
    QpError when the iteration cap is hit.
    """
    H, g, A, b = problem.H, problem.g, problem.A, problem.b
    d, c = H.shape[0], A.shape[0]
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise ValueError("cost matrix must be positive definite") from None

    z = np.linalg.solve(H, -g)
    lam = np.zeros(c)
    active = []
    iterations = 0
    cap = 100 * (d + c)

    while True:
        viol = A @ z - b
        candidates = [i for i in range(c) if i not in active and viol[i] > FEASIBILITY_TOL]
        if not candidates:
            break
        p = max(candidates, key=lambda i: viol[i])
        a_p = A[p]
        while True:
            iterations += 1
            if iterations > cap:
                raise QpError(f"active-set iteration cap {cap} reached")
            dz, dlam = _step_direction(H, A[active], a_p)
            slack = float(a_p @ z - b[p])
            curvature = -float(a_p @ dz)
            t_primal = slack / curvature if curvature > DEGENERACY_TOL * max(1.0, a_p @ a_p) else np.inf
            blocking = [j for j in range(len(active)) if dlam[j] < -DEGENERACY_TOL]
            t_dual, drop = np.inf, None
            for j in blocking:
                t = -lam[active[j]] / dlam[j]
                if t < t_dual:
                    t_dual, drop = t, j
            if not np.isfinite(t_primal) and drop is None:
                raise InfeasibleQpError(f"constraint {p} cannot be satisfied")
            t = min(t_primal, t_dual)
            if np.isfinite(t_primal):
                z = z + t * dz
            for j, i in enumerate(active):
                lam[i] += t * dlam[j]
            lam[p] += t
            if t_primal <= t_dual:
                active.append(p)
                break
            lam[active[drop]] = 0.0
            del active[drop]

    if active:
        # re-solve the final KKT system in one shot to shed accumulated roundoff
        A_w = A[active]
        k = len(active)
        kkt = np.block([[H, A_w.T], [A_w, np.zeros((k, k))]])
        sol = np.linalg.solve(kkt, np.concatenate([-g, b[active]]))
        z = sol[:d]
        lam = np.zeros(c)
        lam[active] = np.maximum(sol[d:], 0.0)
    return QpSolution(z, sorted(active), lam, problem.objective(z), iterations)


def _step_direction(H, A_w, a_p):
    d = H.shape[0]
    k = A_w.shape[0]
    if k == 0:
        return np.linalg.solve(H, -a_p), np.zeros(0)
    kkt = np.block([[H, A_w.T], [A_w, np.zeros((k, k))]])
    sol = np.linalg.solve(kkt, np.concatenate([-a_p, np.zeros(k)]))
    return sol[:d], sol[d:]


def kkt_residuals(problem, result):
    """(feasibility, stationarity, dual, complementarity) violation magnitudes."""
    z, lam = result.solution, result.multipliers
    viol = problem.A @ z - problem.b
    feas = max(0.0, float(np.max(viol, initial=0.0)))
    stat = float(np.max(np.abs(problem.H @ z + problem.g + problem.A.T @ lam)))
    dual = max(0.0, -float(np.min(lam, initial=0.0)))
    comp = float(np.max(np.abs(lam * viol), initial=0.0))
    return feas, stat, dual, comp


def pd_controller(kp, kd, tp):
    """u = -kp (y - y_d) - kd (y' - y_d') on the tracking outputs."""

    def controller(q, qd, t):
        eta = error_state(tp, q, qd, t)
        return -kp * eta[:tp.k] - kd * eta[tp.k:]

    return controller


class ClfQpController:
    """Model-based CLF-QP: min 1/2 u^T M u + s^T u + r  s.t.  V'_est(eta, u) <= -c3 |eta|^2.

    M must be positive definite (defaults to the identity: min-norm). When the
    constraint is infeasible (zero input coefficient with a violated bound)
    the unconstrained minimizer is returned and diagnostics['fallback'] is set.
    """

    def __init__(self, decomposition, tp, clf, M=None, s=None, r=0.0):
        self.decomposition = decomposition
        self.tp = tp
        self.clf = clf
        if M is not None:
            M = np.atleast_2d(np.asarray(M, dtype=float))
        self.M, self.s, self.r = M, s, r
        self.diagnostics = {}

    def __call__(self, q, qd, t):
        drift, coeff = self.decomposition(q, qd, t)
        coeff = np.atleast_1d(coeff)
        m = coeff.shape[0]
        M = np.identity(m) if self.M is None else self.M
        s = np.zeros(m) if self.s is None else np.asarray(self.s, dtype=float)
        eta = error_state(self.tp, q, qd, t)
        bound = -self.clf.c3 * float(eta @ eta)
        problem = QpProblem(M, s, coeff.reshape(1, m), [bound - drift], self.r)
        fallback = False
        try:
            result = solve_qp(problem)
            u, active = result.solution, result.active_set
        except QpError:
            u, active, fallback = np.linalg.solve(M, -s), [], True
        self.diagnostics = {
            "constraint_slack": bound - (drift + float(coeff @ u)),
            "delta": 0.0,
            "active": bool(active),
            "fallback": fallback,
        }
        return u


def clf_qp_controller(model_decomposition, tp, clf, M=None, s=None, r=0.0):
    return ClfQpController(model_decomposition, tp, clf, M, s, r)


@dataclass
class AugmentationConfig:
    c3: float
    slack_weight: float = 100.0
    smoothing_weight: float = 0.1
    u_prev: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.slack_weight > 0:
            raise ValueError("slack weight must be strictly positive")
        if self.smoothing_weight < 0 or self.c3 < 0:
            raise ValueError("weights must be nonnegative")


class AugmentingController:
    """Nominal controller plus a QP correction u' against a learned V' estimate.

    Solves over (u', delta):
        min 1/2 |u_nom + u'|^2 + R |u' - u_prev|^2 + 1/2 C |coeff|^2 delta^2
        s.t. drift + coeff @ (u_nom + u') <= -c3 |eta|^2 + delta,  delta >= 0
    where (drift, coeff) is the estimator's affine decomposition. The applied
    input is u_nom + trust * u'. u' (unscaled) becomes the next u_prev.

    Not thread-safe: u_prev is per-instance state. Call reset() before each rollout.
    """

    def __init__(self, nominal, estimator, cfg, tp, trust=1.0):
        self.nominal = nominal
        self.estimator = estimator
        self.cfg = cfg
        self.tp = tp
        self.trust = trust
        self._initial_prev = cfg.u_prev
        self.reset()

    def reset(self):
        self.u_prev = None if self._initial_prev is None else np.atleast_1d(np.asarray(self._initial_prev, dtype=float)).copy()
        self.diagnostics = {}

    def augment(self, q, qd, t, u_nom):
        """Return (u', delta, active set, constraint slack)."""
        cfg = self.cfg
        drift, coeff = self.estimator.decomposition(q, qd, t)
        coeff = np.atleast_1d(coeff)
        m = coeff.shape[0]
        u_prev = np.zeros(m) if self.u_prev is None else self.u_prev
        eta = error_state(self.tp, q, qd, t)
        bound = -cfg.c3 * float(eta @ eta)
        R = cfg.smoothing_weight
        H = np.zeros((m + 1, m + 1))
        H[:m, :m] = (1 + 2 * R) * np.identity(m)
        H[m, m] = max(cfg.slack_weight * float(coeff @ coeff), SLACK_CURVATURE_FLOOR)
        g = np.concatenate([u_nom - 2 * R * u_prev, [0.0]])
        A = np.zeros((2, m + 1))
        A[0, :m] = coeff
        A[0, m] = -1.0
        A[1, m] = -1.0
        b = np.array([bound - drift - float(coeff @ u_nom), 0.0])
        const = 0.5 * float(u_nom @ u_nom) + R * float(u_prev @ u_prev)
        result = solve_qp(QpProblem(H, g, A, b, const))
        u_aug, delta = result.solution[:m], float(result.solution[m])
        slack = bound - (drift + float(coeff @ (u_nom + u_aug)))
        return u_aug, delta, result.active_set, slack

    def __call__(self, q, qd, t):
        u_nom = np.atleast_1d(np.asarray(self.nominal(q, qd, t), dtype=float))
        try:
            u_aug, delta, active, slack = self.augment(q, qd, t, u_nom)
            fallback = False
        except (QpError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("augmenting QP failed at t=%.3f (%s); using nominal input", t, exc)
            u_aug, delta, active, slack, fallback = np.zeros_like(u_nom), 0.0, [], float("nan"), True
        self.u_prev = u_aug
        self.diagnostics = {"constraint_slack": slack, "delta": delta, "active": active, "fallback": fallback}
        return u_nom + self.trust * u_aug


def augmenting_controller(nominal, estimator, cfg, tp, trust=1.0):
    return AugmentingController(nominal, estimator, cfg, tp, trust)
