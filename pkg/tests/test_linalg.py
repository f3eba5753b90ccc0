import numpy as np
import pytest
import scipy.linalg
import sympy as sp

from zdpolicy.errors import BadPoles, NoStabilizingSolution
from zdpolicy.linalg import (LinearModel, care_residual, controllability_matrix, controllability_rank, eig_decompose,
                             jacobian_fd, linearize_about_origin, linearize_physical, lqr_gain, physical_to_aux_gain,
                             place_poles)

DOUBLE = LinearModel.from_matrices([[0.0, 1.0], [0.0, 0.0]], [0.0, 1.0])


def test_jacobian_identity_and_linear():
    np.testing.assert_allclose(jacobian_fd(lambda x: x, np.ones(3)), np.eye(3), atol=1e-9)
    m = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_allclose(jacobian_fd(lambda x: m @ x, np.ones(4)), m, atol=1e-9)


def test_omega_jacobian_matches_symbolic(cartpole):
    x, xd, th, p = sp.symbols("x xd th p")
    mp, ln, g = 0.1, 1.0, 9.8
    thd = (p - mp * ln * xd * sp.cos(th)) / (mp * ln**2)
    om = sp.Matrix([thd, mp * ln * sp.sin(th) * (g - xd * thd)])
    jac = np.array(om.jacobian([x, xd, th, p]).subs({x: 0, xd: 0, th: 0, p: 0}), dtype=float)
    np.testing.assert_allclose(jacobian_fd(cartpole.omega, np.zeros(4)), jac, atol=1e-6)
    np.testing.assert_allclose(cartpole.omega_jacobian(np.zeros(4)), jac, atol=1e-12)


def test_linearize_recovers_linear_system(chain4):
    lm = linearize_about_origin(chain4)
    # auxiliary input: the eta_gamma row becomes a pure integrator
    expected = chain4.meta["a"].copy()
    expected[1] = 0.0
    np.testing.assert_allclose(lm.a, expected, atol=1e-9)
    np.testing.assert_allclose(lm.b, [0.0, 1.0, 0.0, 0.0])
    phys = linearize_physical(chain4)
    np.testing.assert_allclose(phys.a, chain4.meta["a"], atol=1e-9)


def test_cartpole_aux_linearisation(cartpole):
    lm = linearize_about_origin(cartpole)
    # eta block is a double integrator; z block from the hand Jacobian of omega
    np.testing.assert_allclose(lm.a[:2], [[0, 1, 0, 0], [0, 0, 0, 0]], atol=1e-9)
    np.testing.assert_allclose(lm.a[2:], [[0, -1, 0, 10], [0, 0, 0.98, 0]], atol=1e-6)
    np.testing.assert_allclose(lm.a_eta2, [-1.0, 0.0], atol=1e-6)


def test_eig_decompose():
    vals, vecs = eig_decompose(np.diag([-1.0, -2.0]))
    np.testing.assert_allclose(sorted(vals.real), [-2.0, -1.0])
    np.testing.assert_allclose(np.abs(vecs), np.eye(2)[:, ::-1] if vals[0].real < vals[1].real else np.eye(2))
    # companion matrix of (s+1)(s+2)(s+3) = s^3 + 6 s^2 + 11 s + 6
    comp = np.array([[0, 1, 0], [0, 0, 1], [-6, -11, -6]], dtype=float)
    vals, _ = eig_decompose(comp)
    np.testing.assert_allclose(sorted(vals.real), [-3, -2, -1], atol=1e-9)
    m = np.random.default_rng(1).normal(size=(6, 6))
    vals, vecs = eig_decompose(m)
    assert np.max(np.abs(m @ vecs - vecs * vals)) < 1e-8


def test_place_poles_hand_cases(cartpole):
    scalar = LinearModel.from_matrices([[0.0]], [1.0])
    np.testing.assert_allclose(place_poles(scalar, [-3.0]).k, [3.0])
    np.testing.assert_allclose(place_poles(DOUBLE, [-1.0, -2.0]).k, [2.0, 3.0], atol=1e-12)
    lm = linearize_about_origin(cartpole)
    k = place_poles(lm, [-1, -2, -3, -4])
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(lm.a - np.outer(lm.b, k.k)).real), [-4, -3, -2, -1],
                               atol=1e-6)


def test_place_poles_rejects_bad_poles():
    with pytest.raises(BadPoles):
        place_poles(DOUBLE, [-1.0, -1.0])
    with pytest.raises(BadPoles):
        place_poles(DOUBLE, [-1.0])


def test_lqr_hand_cases():
    k, p = lqr_gain(LinearModel.from_matrices([[0.0]], [1.0]), np.eye(1), 1.0)
    np.testing.assert_allclose(p, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(k.k, [1.0], atol=1e-12)
    k, p = lqr_gain(DOUBLE, np.eye(2), 1.0)
    np.testing.assert_allclose(k.k, [1.0, np.sqrt(3.0)], atol=1e-8)


def test_lqr_cartpole_matches_scipy(cartpole, paper_cost):
    lm = linearize_physical(cartpole)
    k, p = lqr_gain(lm, paper_cost.q, paper_cost.r)
    p_ref = scipy.linalg.solve_continuous_are(lm.a, lm.b.reshape(-1, 1), paper_cost.q, np.array([[paper_cost.r]]))
    np.testing.assert_allclose(p, p_ref, rtol=1e-8)
    np.testing.assert_allclose(k.k, lm.b @ p_ref / paper_cost.r, rtol=1e-8)
    assert care_residual(lm, paper_cost.q, paper_cost.r, p) < 1e-8
    assert np.all(np.linalg.eigvals(lm.a - np.outer(lm.b, k.k)).real < 0)
    assert np.allclose(p, p.T) and np.all(np.linalg.eigvalsh(p) > 0)
    # frozen values from the scipy oracle above
    np.testing.assert_allclose(k.k, [-10.0, 17.33466, -110.24518, -347.69971], rtol=1e-4)


def test_lqr_uncontrollable():
    model = LinearModel.from_matrices(np.zeros((2, 2)) + np.diag([1.0, 0.0]), [0.0, 1.0])
    with pytest.raises(NoStabilizingSolution):
        lqr_gain(model, np.eye(2), 1.0)


def test_controllability():
    np.testing.assert_array_equal(controllability_matrix(DOUBLE), [[0, 1], [1, 0]])
    assert controllability_rank(DOUBLE) == 2
    assert controllability_rank(LinearModel.from_matrices(np.zeros((2, 2)), [1.0, 0.0])) == 1


def test_controllability_cartpole(cartpole):
    assert controllability_rank(linearize_about_origin(cartpole)) == 4


def test_physical_to_aux_gain_is_same_closed_loop(cartpole, paper_cost):
    phys = linearize_physical(cartpole)
    k, _ = lqr_gain(phys, paper_cost.q, paper_cost.r)
    aux = linearize_about_origin(cartpole)
    k_aux = physical_to_aux_gain(cartpole, k.k)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(phys.a - np.outer(phys.b, k.k)).real),
                               np.sort(np.linalg.eigvals(aux.a - np.outer(aux.b, k_aux.k)).real), atol=1e-6)
