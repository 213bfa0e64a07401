import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daclyf.clf import CLF, segway_pitch_tracking, vdot_affine
from daclyf.controllers import (
    AugmentationConfig, AugmentingController, ClfQpController, InfeasibleQpError, QpProblem, kkt_residuals,
    pd_controller, solve_qp,
)
from daclyf.dynamics import SegwayParams, segway_model
from daclyf.learning import ResidualEstimator

TP = segway_pitch_tracking()
CLF_ = CLF([[1.0]], [[2.0]])


def random_qp(rng, d, c):
    B = rng.normal(size=(d, d))
    H = B @ B.T + 0.1 * np.identity(d)
    g = rng.normal(size=d)
    A = rng.normal(size=(c, d))
    # keep the feasible set nonempty: every constraint holds at a random point
    z0 = rng.normal(size=d)
    b = A @ z0 + rng.uniform(0, 1, size=c)
    return QpProblem(H, g, A, b)


def test_qp_examples():
    z, active = solve_qp(QpProblem(np.identity(2), np.zeros(2)))
    np.testing.assert_array_equal(z, 0)
    assert active == []
    z, active = solve_qp(QpProblem([[1.0]], [0.0], [[1.0]], [-1.0]))
    np.testing.assert_allclose(z, [-1.0])
    assert active == [0]
    z, active = solve_qp(QpProblem(np.identity(2), np.zeros(2), [[1.0, 1.0]], [-2.0]))
    np.testing.assert_allclose(z, [-1.0, -1.0], atol=1e-14)


def test_qp_infeasible_and_bad_cost():
    with pytest.raises(InfeasibleQpError):
        solve_qp(QpProblem([[1.0]], [0.0], [[1.0], [-1.0]], [-1.0, -1.0]))
    with pytest.raises(ValueError):
        solve_qp(QpProblem([[0.0]], [0.0]))
    with pytest.raises(ValueError):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], [0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(0, 8), st.integers(0, 2 ** 32 - 1))
def test_qp_kkt_conditions(d, c, seed):
    problem = random_qp(np.random.default_rng(seed), d, c)
    result = solve_qp(problem)
    feas, stat, dual, comp = kkt_residuals(problem, result)
    assert feas <= 1e-9 and stat <= 1e-8 and dual <= 1e-10 and comp <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2 ** 32 - 1))
def test_qp_matches_grid_in_two_variables(c, seed):
    problem = random_qp(np.random.default_rng(seed), 2, c)
    result = solve_qp(problem)
    z = result.solution
    # fine grid around the solution, then check no feasible grid point does better
    axis = np.linspace(-3, 3, 601)
    Z = np.stack(np.meshgrid(z[0] + axis, z[1] + axis), axis=-1).reshape(-1, 2)
    feasible = np.all(Z @ problem.A.T <= problem.b + 1e-12, axis=1)
    vals = 0.5 * np.einsum("ij,jk,ik->i", Z, problem.H, Z) + Z @ problem.g
    best = vals[feasible].min()
    assert result.objective <= best + 1e-9
    assert best - result.objective <= 1e-4


def test_qp_objective_includes_constant():
    result = solve_qp(QpProblem([[2.0]], [-2.0], const=3.0))
    assert result.objective == pytest.approx(2.0)


def test_pd_examples():
    ctrl = pd_controller(1.0, 0.0, TP)
    t = 2.0
    y_d, yd_d, _ = TP.desired(t)
    assert ctrl(np.array([0.0, y_d[0]]), np.array([0.0, yd_d[0]]), t)[0] == 0
    assert ctrl(np.array([0.0, y_d[0] + 0.5]), np.array([0.0, yd_d[0]]), t)[0] == pytest.approx(-0.5)
    assert pd_controller(2.0, 3.0, TP)(np.array([0.0, 0.1]), np.array([0.0, 0.2]), -1.0)[0] < 0


def _fixed(drift, coeff):
    return lambda q, qd, t: (drift, np.array([coeff]))


def test_clf_qp_examples():
    q, qd = np.array([0.0, 0.1]), np.zeros(2)  # t < 0: eta = (0.1, 0), |eta|^2 = 0.01
    ctrl = ClfQpController(_fixed(-1.0, 1.0), TP, CLF_)
    assert ctrl(q, qd, -1.0)[0] == 0.0
    assert not ctrl.diagnostics["active"]
    # drift 1, coeff 1, bound -c3 |eta|^2 = -1 with the right state
    q1 = np.array([0.0, 1.0])
    ctrl = ClfQpController(_fixed(1.0, 1.0), TP, CLF_)
    assert ctrl(q1, qd, -1.0)[0] == pytest.approx(-2.0)
    assert ctrl.diagnostics["active"]
    # on the trajectory the gradient vanishes and u = 0
    model = segway_model(SegwayParams())
    ctrl = ClfQpController(vdot_affine(model, TP, CLF_), TP, CLF_)
    assert ctrl(np.zeros(2), np.zeros(2), -1.0)[0] == 0.0


def test_clf_qp_falls_back_when_infeasible():
    ctrl = ClfQpController(_fixed(1.0, 0.0), TP, CLF_)
    u = ctrl(np.array([0.0, 0.5]), np.zeros(2), -1.0)
    assert u[0] == 0.0 and ctrl.diagnostics["fallback"]


class Fixed:
    """Estimator stub with a constant decomposition."""

    def __init__(self, drift, coeff):
        self.drift, self.coeff = drift, np.atleast_1d(coeff)

    def decomposition(self, q, qd, t):
        return self.drift, self.coeff


def test_augmenting_cancels_nominal_when_unconstrained():
    cfg = AugmentationConfig(c3=1.0, slack_weight=100.0, smoothing_weight=0.0)
    nominal = lambda q, qd, t: np.array([0.7])
    ctrl = AugmentingController(nominal, Fixed(-10.0, 0.0), cfg, TP)
    u = ctrl(np.array([0.0, 0.1]), np.zeros(2), -1.0)
    assert u[0] == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(ctrl.u_prev, [-0.7])


def test_augmenting_zero_gradient_is_finite():
    model = segway_model(SegwayParams())
    est = ResidualEstimator.zero(6, 1, vdot_affine(model, TP, CLF_), TP, CLF_)
    cfg = AugmentationConfig(c3=1.0)
    ctrl = AugmentingController(pd_controller(50, 5, TP), est, cfg, TP, trust=0.5)
    u = ctrl(np.zeros(2), np.zeros(2), -1.0)
    assert np.all(np.isfinite(u))
    assert not ctrl.diagnostics["fallback"]


@pytest.mark.parametrize("R, u_prev", [(0.0, 0.0), (0.3, 0.4)])
def test_augmenting_matches_grid(R, u_prev):
    # u_nom = 0, drift 1, coeff 1, c3 |eta|^2 = 1 (eta = (1, 0) before the reference starts)
    C = 1e3
    cfg = AugmentationConfig(c3=1.0, slack_weight=C, smoothing_weight=R, u_prev=[u_prev])
    ctrl = AugmentingController(lambda q, qd, t: np.zeros(1), Fixed(1.0, 1.0), cfg, TP)
    u_aug, delta, _, _ = ctrl.augment(np.array([0.0, 1.0]), np.zeros(2), -1.0, np.zeros(1))

    up = np.linspace(-2.5, -1.5, 4001)
    dl = np.linspace(0, 0.01, 2001)
    U, D = np.meshgrid(up, dl)
    J = 0.5 * U ** 2 + R * (U - u_prev) ** 2 + 0.5 * C * D ** 2
    J[1 + U > -1 + D + 1e-12] = np.inf
    i = np.unravel_index(np.argmin(J), J.shape)
    J_qp = 0.5 * u_aug[0] ** 2 + R * (u_aug[0] - u_prev) ** 2 + 0.5 * C * delta ** 2
    assert J_qp <= J[i] + 1e-12
    assert J[i] - J_qp <= 1e-4
    assert abs(u_aug[0] - U[i]) <= 1e-3 and abs(delta - D[i]) <= 1e-4


def test_augmenting_trust_scales_correction():
    cfg = AugmentationConfig(c3=1.0, slack_weight=1e8, smoothing_weight=0.0)
    nominal = lambda q, qd, t: np.array([1.0])
    full = AugmentingController(nominal, Fixed(1.0, 1.0), cfg, TP, trust=1.0)(np.array([0, 1.0]), np.zeros(2), -1.0)
    half = AugmentingController(nominal, Fixed(1.0, 1.0), cfg, TP, trust=0.5)(np.array([0, 1.0]), np.zeros(2), -1.0)
    assert half[0] == pytest.approx(1.0 + 0.5 * (full[0] - 1.0))
    none = AugmentingController(nominal, Fixed(1.0, 1.0), cfg, TP, trust=0.0)(np.array([0, 1.0]), np.zeros(2), -1.0)
    assert none[0] == 1.0


def test_augmenting_reset_clears_memory():
    cfg = AugmentationConfig(c3=1.0, smoothing_weight=0.5)
    ctrl = AugmentingController(lambda q, qd, t: np.array([1.0]), Fixed(-5.0, 0.0), cfg, TP)
    ctrl(np.array([0, 0.1]), np.zeros(2), -1.0)
    assert ctrl.u_prev is not None
    ctrl.reset()
    assert ctrl.u_prev is None


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(c3=1.0, slack_weight=0.0)
    with pytest.raises(ValueError):
        AugmentationConfig(c3=-1.0)
