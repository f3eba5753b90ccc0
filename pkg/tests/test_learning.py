import numpy as np
import pytest

from zdpolicy.dynamics import feedback_linearize
from zdpolicy.errors import ValidationError
from zdpolicy.learning import (TrainConfig, invariance_residual, loss_batch, loss_gradient, loss_objective, pretrain,
                               train)
from zdpolicy.linalg import linearize_about_origin, physical_to_aux_gain, place_poles
from zdpolicy.linear_zdp import build_linear_zdp, select_invariant_subspace
from zdpolicy.mlp import MlpParams, init_mlp, linear_mlp, mlp_forward, mlp_input_jacobian
from zdpolicy.ocp import IlqrConfig, QuadraticCost, lqr_controller_gain

FAST = IlqrConfig(horizon_seconds=2.0, dt=0.02)


def _fd_jacobian(params, z, h=1e-6):
    cols = []
    for i in range(z.shape[0]):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((mlp_forward(params, z + e) - mlp_forward(params, z - e)) / (2 * h))
    return np.stack(cols, axis=1)


def _linear_zdp(nf):
    lm = linearize_about_origin(nf)
    k = place_poles(lm, [-1.0, -2.0, -3.0, -4.0])
    sub = select_invariant_subspace(lm.a - np.outer(lm.b, k.k), 2, 2)
    return build_linear_zdp(sub, lm, k)


def _frozen_inputs(nf, zdp, params, zs):
    """u = feedback-linearised -K zeta at zeta = (psi(z), z)."""
    out = []
    for z in zs:
        zeta = np.concatenate([mlp_forward(params, z), z])
        out.append(feedback_linearize(nf, zeta, zdp.k(zeta)))
    return out


# -- network ------------------------------------------------------------------


def test_forward_trivial_cases():
    zero = MlpParams((np.zeros((3, 2)), np.zeros((2, 3))), (np.zeros(3), np.zeros(2)), "relu")
    np.testing.assert_array_equal(mlp_forward(zero, np.array([0.4, -1.0])), 0.0)
    w = np.array([[1.0, 2.0], [-3.0, 0.5]])
    z = np.array([0.3, -0.7])
    np.testing.assert_array_equal(mlp_forward(linear_mlp(w), z), w @ z)
    np.testing.assert_array_equal(mlp_input_jacobian(linear_mlp(w), z), w)
    a = mlp_forward(init_mlp(2, 2, (16, 16), seed=3), z)
    b = mlp_forward(init_mlp(2, 2, (16, 16), seed=3), z)
    assert a.tobytes() == b.tobytes()


def test_params_validation():
    with pytest.raises(ValidationError):
        MlpParams((np.zeros((3, 2)), np.zeros((2, 4))), (np.zeros(3), np.zeros(2)))
    with pytest.raises(ValidationError):
        MlpParams((np.full((1, 2), np.nan),), (np.zeros(1),))
    with pytest.raises(ValidationError):
        MlpParams((np.zeros((1, 2)),), (np.zeros(1),), "sigmoid")


def test_params_vector_and_dict_round_trip():
    p = init_mlp(2, 2, (8, 8), "tanh", seed=1)
    q = p.from_vector(p.to_vector())
    np.testing.assert_array_equal(q.to_vector(), p.to_vector())
    r = MlpParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(r.to_vector(), p.to_vector())
    assert r.activation == "tanh"


def test_input_jacobian_relu_vs_fd():
    p = init_mlp(2, 2, (16, 16), "relu", seed=4)
    z = np.array([0.31, -0.27])
    jac = mlp_input_jacobian(p, z)
    fd = _fd_jacobian(p, z)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-5


def test_input_jacobian_tanh_vs_fd():
    p = init_mlp(2, 2, (8, 8), "tanh", seed=5)
    for z in np.random.default_rng(0).uniform(-2, 2, size=(20, 2)):
        jac = mlp_input_jacobian(p, z)
        np.testing.assert_allclose(jac, _fd_jacobian(p, z), atol=1e-6 * max(1.0, np.max(np.abs(jac))))


def test_batched_jacobian_matches_single():
    p = init_mlp(2, 2, (8,), "tanh", seed=6)
    zs = np.random.default_rng(1).normal(size=(5, 2))
    batch = mlp_input_jacobian(p, zs)
    for z, j in zip(zs, batch):
        np.testing.assert_allclose(mlp_input_jacobian(p, z), j, atol=1e-14)


# -- residual and loss --------------------------------------------------------


def test_invariance_residual_linear_psi(chain4):
    zdp = _linear_zdp(chain4)
    params = linear_mlp(zdp.sub.s_eta.T)
    for z in np.random.default_rng(2).normal(size=(5, 2)):
        (u,) = _frozen_inputs(chain4, zdp, params, [z])
        assert np.linalg.norm(invariance_residual(chain4, params, u, z)) < 1e-8


def test_invariance_residual_equilibrium_and_generic(cartpole):
    p = init_mlp(2, 2, (8,), "tanh", seed=0)
    np.testing.assert_array_equal(invariance_residual(cartpole, p, 0.0, np.zeros(2)), 0.0)
    rng = np.random.default_rng(3)
    for z in rng.uniform(-1, 1, size=(5, 2)):
        assert np.linalg.norm(invariance_residual(cartpole, p, rng.normal(), z)) > 0.0


def test_loss_batch_equilibrium_is_zero(cartpole, paper_cost):
    rep = loss_batch(cartpole, init_mlp(2, 2, (8,), "tanh", seed=0), paper_cost, FAST, np.zeros((3, 2)))
    assert rep.mean_residual == 0.0 and rep.max_residual == 0.0 and rep.n_skipped == 0


def test_loss_batch_linear_psi_near_origin(cartpole, paper_cost):
    """psi_lin on an LQR closed-loop subspace is invariant under u* to first order."""
    lm = linearize_about_origin(cartpole)
    k = physical_to_aux_gain(cartpole, lqr_controller_gain(cartpole, paper_cost).k)
    sub = select_invariant_subspace(lm.a - np.outer(lm.b, k.k), 2, 2, prefer="slowest")
    params = linear_mlp(sub.s_eta.T)
    zs = np.random.default_rng(4).uniform(-0.035, 0.035, size=(8, 2))
    rep = loss_batch(cartpole, params, paper_cost, IlqrConfig(), zs)
    assert np.all(rep.residuals >= 0.0)
    assert rep.mean_residual < 1e-2


def test_loss_gradient_zero_at_invariant_psi(chain4):
    zdp = _linear_zdp(chain4)
    params = linear_mlp(zdp.sub.s_eta.T)
    zs = np.random.default_rng(5).normal(size=(6, 2))
    grad, rep = loss_gradient(chain4, params, QuadraticCost.identity(4, 1.0), FAST, zs,
                              u_frozen=_frozen_inputs(chain4, zdp, params, zs))
    assert rep.max_residual < 1e-8
    assert np.max(np.abs(grad.to_vector())) < 1e-6


def test_loss_gradient_matches_fd_frozen(cartpole, paper_cost):
    p = init_mlp(2, 2, (8,), "tanh", seed=7, output_scale=0.3)
    rng = np.random.default_rng(6)
    zs = rng.uniform(-0.8, 0.8, size=(4, 2))
    u = rng.normal(0.0, 0.5, size=4)
    grad, _ = loss_gradient(cartpole, p, paper_cost, FAST, zs, u_frozen=u, anchor_weight=1.0)
    g = grad.to_vector()
    theta = p.to_vector()
    fd = np.zeros_like(theta)
    h = 1e-6
    for i in range(theta.shape[0]):
        e = np.zeros_like(theta)
        e[i] = h
        fp = loss_objective(cartpole, p.from_vector(theta + e), paper_cost, FAST, zs, u, 1.0)
        fm = loss_objective(cartpole, p.from_vector(theta - e), paper_cost, FAST, zs, u, 1.0)
        fd[i] = (fp - fm) / (2 * h)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_one_descent_step_reduces_batch_loss(cartpole, paper_cost):
    cfg = TrainConfig(pretrain_steps=300, pretrain_batch=64)
    lqr_subspace_slope = np.array([[-4.695, -13.730], [3.641, 12.706]])
    p = pretrain(init_mlp(2, 2, (16, 16), "tanh", seed=0), lqr_subspace_slope, cfg)
    zs = cfg.sample(np.random.default_rng(8), 8)
    grad, rep = loss_gradient(cartpole, p, paper_cost, IlqrConfig(), zs)
    g = grad.to_vector()
    step = p.from_vector(p.to_vector() - 1e-3 * g / np.linalg.norm(g))
    after = loss_batch(cartpole, step, paper_cost, IlqrConfig(), zs)
    assert after.objective < rep.objective


# -- pretraining and SGD ------------------------------------------------------


def test_pretrain_fits_linear_target():
    cfg = TrainConfig(seed=0)
    target = np.array([[-2.225, -7.5], [6.0, 18.1632653061]])
    p, mse = pretrain(init_mlp(2, 2, (64, 64), "tanh", seed=0), target, cfg, return_mse=True)
    assert mse < 1e-4
    assert np.linalg.norm(mlp_forward(p, np.zeros(2))) < 1e-3


def test_pretrain_point_box_gives_zero_function():
    cfg = TrainConfig(sample_box=((0.0, 0.0), (0.0, 0.0)), pretrain_steps=200)
    p = pretrain(init_mlp(2, 2, (8,), "tanh", seed=0), np.ones((2, 2)), cfg)
    assert np.max(np.abs(mlp_forward(p, np.zeros(2)))) < 1e-8


def test_zero_learning_rate_leaves_params(cartpole, paper_cost):
    p = init_mlp(2, 2, (8,), "tanh", seed=0, output_scale=0.1)
    cfg = TrainConfig(learning_rate=0.0, steps=3, batch_size=2)
    out, hist = train(cartpole, p, paper_cost, cfg, FAST)
    np.testing.assert_array_equal(out.to_vector(), p.to_vector())
    assert len(hist.steps) == 3


def test_training_is_deterministic(cartpole, paper_cost):
    p = init_mlp(2, 2, (8,), "tanh", seed=0, output_scale=0.1)
    cfg = TrainConfig(learning_rate=1e-4, steps=3, batch_size=2, seed=11)
    a, ha = train(cartpole, p, paper_cost, cfg, FAST)
    b, hb = train(cartpole, p, paper_cost, cfg, FAST)
    assert a.to_vector().tobytes() == b.to_vector().tobytes()
    assert ha.mean_residual == hb.mean_residual


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(sample_box=((1.0, -1.0), (0.0, 1.0)))
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="adamw")


def test_smoothed_history():
    from zdpolicy.learning import LossReport, TrainHistory

    h = TrainHistory()
    for i, v in enumerate([4.0, 2.0, 0.0, 2.0]):
        h.append(i, LossReport(v, v, np.array([v])))
    np.testing.assert_allclose(h.smoothed(2), [4.0, 3.0, 1.0, 1.0])
