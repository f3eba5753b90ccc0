import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from zdpolicy import kernels
from zdpolicy.dynamics import (CartpoleParams, NzState, annihilation_residual, cartpole_normal_form, decoupling,
                               feedback_linearize, linear_normal_form, system_of, zero_dynamics_rhs)
from zdpolicy.errors import SingularDecoupling, ValidationError
from zdpolicy.mlp import CallablePsi, zero_psi


def _lagrange_oracle():
    """Accelerations and conjugate momentum of the cartpole from the Lagrangian."""
    x, th, xd, thd, xdd, thdd, f, d = sp.symbols("x th xd thd xdd thdd f d", real=True)
    mc, mp, ln, g = 1.0, 0.1, 1.0, 9.8
    kin = sp.Rational(1, 2) * (mc + mp) * xd**2 + mp * ln * xd * thd * sp.cos(th) \
        + sp.Rational(1, 2) * mp * ln**2 * thd**2
    lag = kin - mp * g * ln * sp.cos(th)
    q, qd, qdd = [x, th], [xd, thd], [xdd, thdd]
    eqs = []
    for i, force in enumerate([f - d, 0]):
        dl_dqd = sp.diff(lag, qd[i])
        ddt = sum(sp.diff(dl_dqd, q[j]) * qd[j] + sp.diff(dl_dqd, qd[j]) * qdd[j] for j in range(2))
        eqs.append(sp.Eq(ddt - sp.diff(lag, q[i]), force))
    sol = sp.solve(eqs, [xdd, thdd], dict=True)[0]
    acc = sp.lambdify((th, xd, thd, f, d), [sol[xdd], sol[thdd]], "numpy")
    p_th = sp.lambdify((th, xd, thd), sp.diff(lag, thd), "numpy")
    p_th_dot = sp.lambdify((th, xd, thd), sp.diff(lag, th), "numpy")
    return acc, p_th, p_th_dot


ORACLE = _lagrange_oracle()


def test_damping_dead_zone():
    assert kernels.cartpole_damping(5e-4, 1e-3) == 0.0
    assert kernels.cartpole_damping(0.5, 1e-3) == 0.5
    assert kernels.cartpole_damping(-0.5, 1e-3) == -0.5


def test_drift_zero_at_origin(cartpole_phys):
    np.testing.assert_array_equal(cartpole_phys.drift(np.zeros(4)), np.zeros(4))


def test_physical_dynamics_match_lagrangian(cartpole_phys):
    acc, _, _ = ORACLE
    rng = np.random.default_rng(0)
    for x in rng.uniform(-2, 2, size=(50, 4)):
        u = rng.normal()
        xdot = cartpole_phys.drift(x) + cartpole_phys.actuation(x) * u
        d = x[2] if abs(x[2]) >= 1e-3 else 0.0
        np.testing.assert_allclose(xdot[2:], acc(x[1], x[2], x[3], u, d), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(xdot[:2], x[2:], rtol=0, atol=0)


def test_normal_form_matches_pushed_forward_dynamics(cartpole, cartpole_phys):
    _, p_th, p_th_dot = ORACLE
    rng = np.random.default_rng(1)
    for x in rng.uniform(-2, 2, size=(50, 4)):
        u = rng.normal()
        zeta = cartpole.to_nz(x)
        assert zeta[3] == pytest.approx(p_th(x[1], x[2], x[3]), abs=1e-12)
        xdot = cartpole_phys.drift(x) + cartpole_phys.actuation(x) * u
        h = 1e-6
        push = (cartpole.to_nz(x + h * xdot) - cartpole.to_nz(x - h * xdot)) / (2 * h)
        np.testing.assert_allclose(cartpole.rhs(zeta, u), push, rtol=1e-6, atol=1e-6)
        assert cartpole.rhs(zeta, u)[3] == pytest.approx(p_th_dot(x[1], x[2], x[3]), rel=1e-10, abs=1e-12)


def test_phi_origin_and_hand_point(cartpole):
    np.testing.assert_array_equal(cartpole.to_nz(np.zeros(4)), np.zeros(4))
    # x = 1, everything else zero: p_theta = 0
    np.testing.assert_allclose(cartpole.to_nz(np.array([1.0, 0.0, 0.0, 0.0])), [1.0, 0.0, 0.0, 0.0])
    # xdot = 2 at theta = 0: p_theta = m_p l xdot = 0.2
    np.testing.assert_allclose(cartpole.to_nz(np.array([0.0, 0.0, 2.0, 0.0])), [0.0, 2.0, 0.0, 0.2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_phi_round_trip(x):
    nf = cartpole_normal_form()
    x = np.array(x)
    np.testing.assert_allclose(nf.from_nz(nf.to_nz(x)), x, rtol=0, atol=1e-10)


def test_integrator_structure(cartpole):
    np.testing.assert_array_equal(cartpole.f_mat, [[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(cartpole.g_vec, [0.0, 1.0])
    assert (cartpole.gamma, cartpole.nz, cartpole.n) == (2, 2, 4)


def test_nzstate_split_round_trip():
    s = NzState.split(np.arange(4.0), 2)
    np.testing.assert_array_equal(s.eta, [0.0, 1.0])
    np.testing.assert_array_equal(s.as_vector(), np.arange(4.0))


def test_annihilation_on_sampled_states(cartpole, cartpole_phys):
    rng = np.random.default_rng(2)
    worst = max(annihilation_residual(cartpole, cartpole_phys, x) for x in rng.uniform(-2, 2, size=(100, 4)))
    assert worst < 1e-6
    assert annihilation_residual(cartpole, cartpole_phys, np.zeros(4)) == pytest.approx(0.0, abs=1e-12)


def test_annihilation_detects_input_dependent_coordinates(cartpole, cartpole_phys):
    """z = (theta, theta_dot) is not input-free: the residual must flag it."""
    from dataclasses import replace

    bad = replace(cartpole, to_nz=lambda x: np.array([x[0], x[2], x[1], x[3]]))
    rng = np.random.default_rng(3)
    res = [annihilation_residual(bad, cartpole_phys, x) for x in rng.uniform(-2, 2, size=(20, 4))]
    assert min(res) > 1e-3


def test_feedback_linearize_consistency(cartpole):
    rng = np.random.default_rng(4)
    for zeta in rng.uniform(-1, 1, size=(20, 4)):
        u_aux = rng.normal()
        v = feedback_linearize(cartpole, zeta, u_aux)
        assert cartpole.rhs(zeta, v)[1] == pytest.approx(u_aux, abs=1e-12)
        fh, _ = cartpole.fhat_ghat(zeta)
        assert feedback_linearize(cartpole, zeta, fh[1]) == pytest.approx(0.0, abs=1e-12)


def test_feedback_linearize_origin_matches_oracle(cartpole):
    acc, _, _ = ORACLE
    # xdd = u / m_c at the upright equilibrium, so v = m_c for u_aux = 1
    gain = acc(0.0, 0.0, 0.0, 1.0, 0.0)[0]
    assert feedback_linearize(cartpole, np.zeros(4), 1.0) == pytest.approx(1.0 / gain, rel=1e-12)
    assert decoupling(cartpole, np.zeros(4)) == pytest.approx(gain, rel=1e-12)


def test_feedback_linearize_singular():
    nf = linear_normal_form(np.zeros((2, 2)) + np.eye(2, k=1), np.array([0.0, 1e-12]), 2)
    with pytest.raises(SingularDecoupling):
        feedback_linearize(nf, np.zeros(2), 1.0)


def test_zero_dynamics_rhs(cartpole):
    np.testing.assert_allclose(zero_dynamics_rhs(cartpole, zero_psi(2, 2), np.zeros(2)), np.zeros(2))
    out = zero_dynamics_rhs(cartpole, zero_psi(2, 2), np.array([0.1, 0.0]))
    # theta_dot = p_theta / (m_p l^2) = 0, p_theta_dot = m_p l g sin(theta)
    np.testing.assert_allclose(out, [0.0, 0.1 * 9.8 * np.sin(0.1)], rtol=1e-12)
    psi = CallablePsi(lambda z: np.zeros(2), 2, 2)
    np.testing.assert_allclose(zero_dynamics_rhs(cartpole, psi, np.array([0.1, 0.0])), out)


def test_params_validation():
    with pytest.raises(ValidationError):
        CartpoleParams(cart_mass=-1.0)
    with pytest.raises(ValidationError):
        CartpoleParams(damping_threshold=np.nan)


def test_linear_normal_form_validation():
    with pytest.raises(ValidationError):
        linear_normal_form(np.eye(3), np.array([0.0, 1.0, 0.0]), 2)  # row 0 not a shift
    with pytest.raises(ValidationError):
        linear_normal_form(np.eye(2, k=1), np.array([1.0, 1.0]), 2)  # input on eta_1


def test_system_of_round_trip(cartpole):
    sys_phys = system_of(cartpole)
    x = np.array([0.1, 0.2, -0.3, 0.4])
    np.testing.assert_allclose(sys_phys.drift(x), cartpole_phys_drift(x))


def cartpole_phys_drift(x):
    from zdpolicy.dynamics import cartpole_system

    return cartpole_system().drift(x)
