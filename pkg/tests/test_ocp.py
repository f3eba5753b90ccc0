import numpy as np
import pytest

from zdpolicy.errors import ValidationError
from zdpolicy.linalg import linearize_physical, lqr_gain
from zdpolicy.ocp import (IlqrConfig, OptimalControl, QuadraticCost, ilqr_solve, lqr_controller_gain, mpc_rollout,
                          optimal_control_query, value_decrease_check)

# dt small enough that the discrete Riccati recursion matches the continuous gain
FINE = IlqrConfig(horizon_seconds=0.1, dt=1e-5)


@pytest.fixture(scope="module")
def di_lqr(double_integrator):
    cost = QuadraticCost.identity(2, 1.0)
    k, p = lqr_gain(linearize_physical(double_integrator), cost.q, cost.r)
    return cost, k, p


def test_quadratic_cost_validation():
    with pytest.raises(ValidationError):
        QuadraticCost(np.array([[1.0, 2.0], [0.0, 1.0]]), 1.0)
    with pytest.raises(ValidationError):
        QuadraticCost(np.eye(2), 0.0)
    with pytest.raises(ValidationError):
        QuadraticCost(-np.eye(2), 1.0)
    with pytest.raises(ValidationError):
        IlqrConfig(horizon_seconds=1.0, dt=0.3)


def test_equilibrium_start(cartpole, paper_cost):
    sol = ilqr_solve(cartpole, paper_cost, np.zeros(4))
    np.testing.assert_array_equal(sol.nominal_inputs, 0.0)
    assert sol.cost == 0.0
    u, _ = optimal_control_query(cartpole, paper_cost, np.zeros(4))
    assert u == 0.0


def test_linear_problem_matches_riccati(double_integrator, di_lqr):
    cost, k, p = di_lqr
    zeta0 = np.array([0.1, -0.05])
    sol = ilqr_solve(double_integrator, cost, zeta0, FINE)
    np.testing.assert_allclose(sol.feedback_gains[0], -k.k, atol=1e-4)
    assert sol.cost == pytest.approx(zeta0 @ p @ zeta0, rel=1e-2)
    u, du = optimal_control_query(double_integrator, cost, zeta0, FINE)
    assert u == pytest.approx(-k.k @ zeta0, rel=1e-3)
    np.testing.assert_allclose(du, -k.k, atol=1e-4)


def test_cartpole_theta_half_converges(cartpole, paper_cost):
    zeta0 = cartpole.to_nz(np.array([0.0, 0.5, 0.0, 0.0]))
    sol = ilqr_solve(cartpole, paper_cost, zeta0)
    assert sol.converged
    # the 5 s plan ends inside the LQR terminal region, not at the origin
    assert np.linalg.norm(sol.nominal_states[-1]) < 0.05
    assert np.all(np.diff(sol.history[: sol.iterations + 1]) <= 0.0)
    traj = mpc_rollout(cartpole, paper_cost, zeta0, 10.0)
    assert traj.status == "ok"
    assert np.linalg.norm(traj.states[-1]) < 1e-2


def test_sensitivity_matches_finite_differences(cartpole, paper_cost):
    """Second-order sensitivity vs differences of tightly converged solves."""
    oc = OptimalControl(cartpole, paper_cost, IlqrConfig(cost_tol=1e-12, max_iters=300))
    zeta = np.array([0.05, -0.1, 0.1, 0.05])
    sol = oc.solve(zeta)
    du = oc.sensitivity(sol)
    fd = np.zeros(4)
    h = 1e-4
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd[i] = (oc.solve(zeta + e, warm=sol).nominal_inputs[0] - oc.solve(zeta - e, warm=sol).nominal_inputs[0]) / (2 * h)
    np.testing.assert_allclose(du, fd, rtol=0.05)


def test_lqr_controller_gain_is_baseline(cartpole, paper_cost):
    k = lqr_controller_gain(cartpole, paper_cost)
    np.testing.assert_allclose(k.k, [-10.0, 17.33466, -110.24518, -347.69971], rtol=1e-5)


def test_value_decrease_cartpole(cartpole, paper_cost):
    rep = value_decrease_check(cartpole, paper_cost, cartpole.to_nz(np.array([0.0, 0.3, 0.0, 0.0])))
    assert rep.holds
    assert np.all(rep.vdot < 0.0)


def test_value_decrease_equilibrium(cartpole, paper_cost):
    rep = value_decrease_check(cartpole, paper_cost, np.zeros(4))
    assert rep.holds
    np.testing.assert_array_equal(rep.values, 0.0)


def test_value_decrease_linear_closed_form(double_integrator, di_lqr):
    cost, k, p = di_lqr
    cfg = IlqrConfig(horizon_seconds=1.0, dt=1e-3)
    rep = value_decrease_check(double_integrator, cost, np.array([0.3, 0.0]), cfg, stride=1, n_samples=50)
    a_cl = np.array([[0.0, 1.0], [0.0, 0.0]]) - np.outer([0.0, 1.0], k.k)
    rate = -(cost.q + cost.r * np.outer(k.k, k.k))
    # V_dot at the interval midpoints under the LQR flow
    from scipy.linalg import expm

    mids = (rep.times[:-1] + rep.times[1:]) / 2
    ref = np.array([(expm(a_cl * t) @ [0.3, 0.0]) @ rate @ (expm(a_cl * t) @ [0.3, 0.0]) for t in mids])
    np.testing.assert_allclose(rep.vdot, ref, rtol=0.02)
