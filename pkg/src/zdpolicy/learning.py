"""Learning psi_theta by minimising the invariance residual under u*.

For a sample z the candidate state is zeta = (psi(z), z) and the residual

    r = fhat(zeta) + ghat(zeta) u*(zeta) - (d psi/dz) omega(zeta)

vanishes for every z exactly when the graph of psi is invariant under u*.
SGD minimises the batch mean of ||r||^2; reports use the unsquared norm.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .dynamics import NormalFormSystem
from .errors import Diverged, TrainingDiverged, ValidationError
from .mlp import MlpParams, forward_tangent, backward_tangent, mlp_forward
from .ocp import IlqrConfig, OptimalControl, QuadraticCost

log = logging.getLogger(__name__)

# theta (rad), p_theta; |p_theta| <= 0.6 covers |theta_dot| <= 6 rad/s at rest
DEFAULT_BOX = ((-1.2, 1.2), (-0.6, 0.6))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    steps: int = 2000
    sample_box: tuple = DEFAULT_BOX
    seed: int = 0
    pretrain_steps: int = 6000
    pretrain_lr: float = 1e-2
    pretrain_batch: int = 256
    optimizer: str = "momentum"
    momentum: float = 0.9
    anchor_weight: float = 0.0
    pin_origin: bool = True  # project psi(0) = 0 after every update
    grad_clip: float = 10.0  # 0 disables
    smoothing_window: int = 100
    jobs: int = 1

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.sample_box)
        object.__setattr__(self, "sample_box", box)
        if self.batch_size < 1 or self.steps < 0 or self.pretrain_steps < 0 or self.pretrain_batch < 1:
            raise ValidationError("batch sizes must be positive and step counts non-negative")
        if self.learning_rate < 0.0 or self.pretrain_lr < 0.0:
            raise ValidationError("learning rates must be non-negative")
        if any(hi < lo for lo, hi in box):
            raise ValidationError("sample box bounds must satisfy lo <= hi")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValidationError("optimizer must be 'sgd' or 'momentum'")
        if not 0.0 <= self.momentum < 1.0 or self.anchor_weight < 0.0 or self.grad_clip < 0.0:
            raise ValidationError("momentum in [0, 1); anchor_weight and grad_clip non-negative")
        if self.smoothing_window < 1 or self.jobs < 1:
            raise ValidationError("smoothing_window and jobs must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo = np.array([b[0] for b in self.sample_box])
        hi = np.array([b[1] for b in self.sample_box])
        return lo + (hi - lo) * rng.random((n, lo.shape[0]))


@dataclass(frozen=True, eq=False)
class LossReport:
    mean_residual: float
    max_residual: float
    residuals: np.ndarray
    n_skipped: int = 0
    objective: float = 0.0  # mean squared residual


@dataclass(eq=False)
class TrainHistory:
    steps: list = field(default_factory=list)
    mean_residual: list = field(default_factory=list)
    max_residual: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def append(self, step, report: LossReport):
        self.steps.append(int(step))
        self.mean_residual.append(report.mean_residual)
        self.max_residual.append(report.max_residual)
        self.skipped.append(report.n_skipped)

    def smoothed(self, window: int) -> np.ndarray:
        """Trailing moving average of the mean residual."""
        x = np.asarray(self.mean_residual, dtype=float)
        c = np.concatenate([[0.0], np.cumsum(x)])
        idx = np.arange(1, x.shape[0] + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,mean_residual,max_residual\n")
            for s, m, x in zip(self.steps, self.mean_residual, self.max_residual):
                fh.write(f"{s},{m!r},{x!r}\n")


def _network_eval(params: MlpParams, z):
    """(psi(z), d psi/dz) at a single point via the compiled kernel."""
    w, b, sizes, act = params.kernel_arrays()
    val, jac, _ = kernels.mlp_eval(w, b, sizes, act, np.asarray(z, dtype=float))
    return val, jac


def invariance_residual(nf: NormalFormSystem, params: MlpParams, u_star: float, z) -> np.ndarray:
    """fhat + ghat u* - (d psi/dz) omega at zeta = (psi(z), z)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    val, jac = _network_eval(params, z)
    zeta = np.concatenate([val, z])
    vel = nf.rhs(zeta, u_star)
    return vel[: nf.gamma] - jac @ vel[nf.gamma:]


class _Sampler:
    """Per-sample u* queries and residual Jacobians, optionally threaded."""

    def __init__(self, nf: NormalFormSystem, cost: QuadraticCost, ilqr_cfg: IlqrConfig, jobs: int = 1,
                 solver: Optional[OptimalControl] = None):
        self.nf = nf
        self.oc = solver or OptimalControl(nf, cost, ilqr_cfg)
        self.jobs = jobs

    def _one(self, params: MlpParams, z, freeze_u: Optional[float], need_jac: bool):
        nf = self.nf
        g = nf.gamma
        val, jac = _network_eval(params, z)
        zeta = np.concatenate([val, z])
        if freeze_u is None:
            try:
                u, du = self.oc.query(zeta)
            except Diverged:
                return None
        else:
            u, du = float(freeze_u), np.zeros(nf.n)
        vel = nf.rhs(zeta, u)
        om = vel[g:]
        r = vel[:g] - jac @ om
        if not np.all(np.isfinite(r)):
            return None
        if not need_jac:
            return r, u, om, None
        drhs = kernels.rhs_jacobian(nf.kind, g, nf.params, zeta, u, self.oc.cfg.jac_step)
        _, ghat = nf.fhat_ghat(zeta)
        dr_deta = drhs[:g, :g] - jac @ drhs[g:, :g]
        if freeze_u is None:
            dr_deta = dr_deta + np.outer(ghat, du[:g])
        return r, u, om, dr_deta

    def map(self, params, zs, frozen, need_jac):
        frozen = [None] * len(zs) if frozen is None else list(frozen)
        args = list(zip(zs, frozen))
        if self.jobs > 1 and len(args) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return list(pool.map(lambda a: self._one(params, a[0], a[1], need_jac), args))
        return [self._one(params, z, f, need_jac) for z, f in args]


def _report(results) -> LossReport:
    res = np.array([np.linalg.norm(r[0]) for r in results if r is not None])
    skipped = sum(r is None for r in results)
    if res.shape[0] == 0:
        return LossReport(float("nan"), float("nan"), res, skipped, float("nan"))
    return LossReport(float(res.mean()), float(res.max()), res, skipped, float(np.mean(res**2)))


def loss_batch(nf: NormalFormSystem, params: MlpParams, cost: QuadraticCost, cfg: IlqrConfig, z_samples,
               u_frozen=None, jobs: int = 1, solver: Optional[OptimalControl] = None) -> LossReport:
    """Mean and max of ||r|| over the batch; samples whose iLQR solve diverges are skipped."""
    zs = np.atleast_2d(np.asarray(z_samples, dtype=float))
    return _report(_Sampler(nf, cost, cfg, jobs, solver).map(params, zs, u_frozen, False))


def _anchor_gradient(params: MlpParams, weight: float):
    nz = params.input_dim
    zero = np.zeros((1, nz))
    val, _, cache = forward_tangent(params, zero, zero)
    grad = backward_tangent(params, cache, 2.0 * weight * val, np.zeros_like(val))
    return float(weight * np.sum(val**2)), grad


def _batch_gradient(params: MlpParams, zs, results):
    keep = [i for i, r in enumerate(results) if r is not None]
    if not keep:
        return None
    z = zs[keep]
    om = np.array([results[i][2] for i in keep])
    r = np.array([results[i][0] for i in keep])
    drd = np.array([results[i][3] for i in keep])
    _, _, cache = forward_tangent(params, z, om)
    g_out = 2.0 * np.einsum("bij,bi->bj", drd, r) / len(keep)
    g_tan = -2.0 * r / len(keep)
    return backward_tangent(params, cache, g_out, g_tan)


def loss_gradient(nf: NormalFormSystem, params: MlpParams, cost: QuadraticCost, cfg: IlqrConfig, z_samples,
                  u_frozen=None, anchor_weight: float = 0.0, jobs: int = 1,
                  solver: Optional[OptimalControl] = None):
    """Gradient over theta of mean ||r||^2 (+ anchor_weight ||psi(0)||^2).

    u* enters through its time-0 iLQR feedback gain. With ``u_frozen`` (one
    input per sample) u* is held constant and its sensitivity dropped.
    Returns ``(gradient as MlpParams, LossReport)``.
    """
    zs = np.atleast_2d(np.asarray(z_samples, dtype=float))
    results = _Sampler(nf, cost, cfg, jobs, solver).map(params, zs, u_frozen, True)
    report = _report(results)
    grad = _batch_gradient(params, zs, results)
    if grad is None:
        grad = params.scaled(0.0)
    if anchor_weight > 0.0:
        _, ga = _anchor_gradient(params, anchor_weight)
        grad = params.from_vector(grad.to_vector() + ga.to_vector())
    return grad, report


def loss_objective(nf, params, cost, cfg, z_samples, u_frozen=None, anchor_weight: float = 0.0,
                   solver: Optional[OptimalControl] = None) -> float:
    """The scalar that :func:`loss_gradient` differentiates."""
    rep = loss_batch(nf, params, cost, cfg, z_samples, u_frozen, solver=solver)
    value = rep.objective
    if anchor_weight > 0.0:
        value += anchor_weight * float(np.sum(mlp_forward(params, np.zeros(params.input_dim)) ** 2))
    return value


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


def _adam(params: MlpParams, grad_fn, steps: int, lr: float, rng, beta1=0.9, beta2=0.999, eps=1e-8,
          final_lr_ratio=0.01):
    """Adam with the step size decayed geometrically to ``final_lr_ratio * lr``."""
    theta = params.to_vector()
    decay = final_lr_ratio ** (1.0 / max(steps - 1, 1))
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, steps + 1):
        g = grad_fn(params.from_vector(theta), rng)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta = theta - lr * decay ** (t - 1) * mhat / (np.sqrt(vhat) + eps)
    return params.from_vector(theta)


def _hidden_features(params: MlpParams, z) -> np.ndarray:
    a = z
    for w, b in zip(params.layer_weights[:-1], params.layer_biases[:-1]):
        s = a @ w.T + b
        a = np.maximum(s, 0.0) if params.activation == "relu" else np.tanh(s)
    return a


def _refit_last_layer(params: MlpParams, target, z, origin_weight: float = 1e3) -> MlpParams:
    """Weighted least-squares solve for the final affine layer on fixed hidden features."""
    z = np.vstack([np.zeros((1, z.shape[1])), z])
    feats = np.hstack([_hidden_features(params, z), np.ones((z.shape[0], 1))])
    weights = np.ones(z.shape[0])
    weights[0] = origin_weight
    sol, *_ = np.linalg.lstsq(feats * weights[:, None], target(z) * weights[:, None], rcond=None)
    ws = list(params.layer_weights)
    bs = list(params.layer_biases)
    ws[-1] = sol[:-1].T.copy()
    bs[-1] = sol[-1].copy()
    return MlpParams(tuple(ws), tuple(bs), params.activation)


def pretrain(params: MlpParams, target, cfg: TrainConfig, tol: float = 1e-4, return_mse: bool = False):
    """Regress psi_theta onto a target map (typically psi_lin(z) = S_eta^T z) over the sample box.

    ``target`` maps a (B, n_z) batch to (B, gamma), or is a (gamma, n_z)
    matrix. The origin is included in every batch so psi_theta(0) is pinned
    to target(0). Runs Adam for ``cfg.pretrain_steps``, refits the final
    layer by least squares, then reports the held-out mean-square error.
    """
    if not callable(target):
        mat = np.atleast_2d(np.asarray(target, dtype=float))

        def target(z, mat=mat):
            return z @ mat.T

    rng = np.random.default_rng(cfg.seed + 7919)
    nz = params.input_dim

    def grad_fn(p, rng):
        z = np.vstack([np.zeros((1, nz)), cfg.sample(rng, cfg.pretrain_batch - 1)]) if cfg.pretrain_batch > 1 \
            else np.zeros((1, nz))
        y = target(z)
        pred, _, cache = forward_tangent(p, z, np.zeros_like(z))
        diff = pred - y
        g_out = 2.0 * diff / diff.size
        g_out[0] *= cfg.pretrain_batch  # origin anchor
        return backward_tangent(p, cache, g_out, np.zeros_like(pred)).to_vector()

    fitted = _adam(params, grad_fn, cfg.pretrain_steps, cfg.pretrain_lr, rng)
    fitted = _refit_last_layer(fitted, target, cfg.sample(rng, 4096))
    z_test = cfg.sample(np.random.default_rng(cfg.seed + 104729), 1000)
    mse = float(np.mean((mlp_forward(fitted, z_test) - target(z_test)) ** 2))
    if mse > tol:
        log.warning("pretraining mean-square error %.3e above %.1e", mse, tol)
    return (fitted, mse) if return_mse else fitted


# --------------------------------------------------------------------------
# SGD on the invariance loss
# --------------------------------------------------------------------------


def pin_origin(params: MlpParams) -> MlpParams:
    """Shift the output bias so that psi(0) = 0 (the equilibrium lies on the manifold)."""
    offset = mlp_forward(params, np.zeros(params.input_dim))
    bs = list(params.layer_biases)
    bs[-1] = bs[-1] - offset
    return MlpParams(params.layer_weights, tuple(bs), params.activation)


def _origin_jacobian(params: MlpParams) -> np.ndarray:
    """d psi(0) / d theta, shape (gamma, n_params)."""
    zero = np.zeros((1, params.input_dim))
    _, _, cache = forward_tangent(params, zero, zero)
    rows = []
    for i in range(params.output_dim):
        g_out = np.zeros((1, params.output_dim))
        g_out[0, i] = 1.0
        rows.append(backward_tangent(params, cache, g_out, np.zeros_like(g_out)).to_vector())
    return np.array(rows)


def project_to_origin_tangent(params: MlpParams, g) -> np.ndarray:
    """Remove the component of ``g`` that moves psi(0), to first order."""
    j0 = _origin_jacobian(params)
    return g - j0.T @ np.linalg.solve(j0 @ j0.T, j0 @ g)


def train(nf: NormalFormSystem, params: MlpParams, cost: QuadraticCost, train_cfg: TrainConfig,
          ilqr_cfg: IlqrConfig = IlqrConfig(), callback=None):
    """Fixed-step SGD (optionally with momentum) over freshly sampled batches.

    With ``pin_origin`` the gradient is projected onto the tangent space of
    {psi(0) = 0} and every update is followed by an output-bias shift that
    removes the remaining second-order drift of psi(0). Raises
    :class:`TrainingDiverged` once a batch loss exceeds 10x the first.
    Returns ``(params, TrainHistory)``.
    """
    rng = np.random.default_rng(train_cfg.seed)
    solver = OptimalControl(nf, cost, ilqr_cfg)
    theta = params.to_vector()
    velocity = np.zeros_like(theta)
    history = TrainHistory()
    first = None
    mu = train_cfg.momentum if train_cfg.optimizer == "momentum" else 0.0
    for step in range(train_cfg.steps):
        zs = train_cfg.sample(rng, train_cfg.batch_size)
        current = params.from_vector(theta)
        grad, report = loss_gradient(nf, current, cost, ilqr_cfg, zs, anchor_weight=train_cfg.anchor_weight,
                                     jobs=train_cfg.jobs, solver=solver)
        history.append(step, report)
        if not np.isfinite(report.mean_residual):
            raise TrainingDiverged(f"step {step}: every sample diverged")
        if first is None:
            first = report.mean_residual
        elif report.mean_residual > 10.0 * first:
            raise TrainingDiverged(f"step {step}: loss {report.mean_residual:.3e} exceeds 10x initial {first:.3e}")
        g = grad.to_vector()
        if train_cfg.pin_origin:
            g = project_to_origin_tangent(current, g)
        if train_cfg.grad_clip > 0.0:
            gn = np.linalg.norm(g)
            if gn > train_cfg.grad_clip:
                g = g * (train_cfg.grad_clip / gn)
        velocity = mu * velocity - train_cfg.learning_rate * g
        theta = theta + velocity
        if train_cfg.pin_origin and train_cfg.learning_rate > 0.0:
            theta = pin_origin(params.from_vector(theta)).to_vector()
        if callback is not None:
            callback(step, report)
        if step % 100 == 0:
            log.info("step %d mean residual %.4e max %.4e", step, report.mean_residual, report.max_residual)
    return params.from_vector(theta), history
