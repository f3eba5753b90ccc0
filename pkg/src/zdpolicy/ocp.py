"""Infinite-horizon optimal control approximated by iLQR with an LQR terminal cost."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .dynamics import NormalFormSystem, as_zeta
from .errors import Diverged, ValidationError
from .linalg import GainMatrix, linearize_physical, lqr_gain


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """c(zeta, u) = zeta^T Q zeta + r u^2."""

    q: np.ndarray
    r: float

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if q.shape[0] != q.shape[1] or not np.allclose(q, q.T, atol=1e-12):
            raise ValidationError("Q must be square and symmetric")
        if np.any(np.linalg.eigvalsh(q) <= 0.0):
            raise ValidationError("Q must be positive definite")
        if not np.isfinite(self.r) or self.r <= 0.0:
            raise ValidationError("r must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", float(self.r))

    @classmethod
    def identity(cls, n: int, r: float = 0.01) -> "QuadraticCost":
        return cls(np.eye(n), r)

    def stage(self, zeta, u) -> float:
        zeta = np.asarray(zeta, dtype=float)
        return float(zeta @ self.q @ zeta + self.r * u * u)


@dataclass(frozen=True)
class IlqrConfig:
    horizon_seconds: float = 5.0
    dt: float = 0.01
    max_iters: int = 100
    cost_tol: float = 1e-6
    regularization: float = 1e-6
    line_search_betas: tuple = (1.0, 0.5, 0.25, 0.1, 0.05, 0.01)
    escape_bound: float = 50.0
    jac_step: float = 1e-6
    hessian_step: float = 1e-5  # central-difference step for the second-order sensitivity sweep

    def __post_init__(self):
        if self.dt <= 0.0 or self.horizon_seconds <= 0.0:
            raise ValidationError("horizon and dt must be positive")
        ratio = self.horizon_seconds / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio) or round(ratio) < 1:
            raise ValidationError("horizon_seconds / dt must be a positive integer")
        if self.max_iters < 1 or self.cost_tol <= 0.0 or self.regularization < 0.0:
            raise ValidationError("max_iters, cost_tol must be positive; regularization non-negative")
        betas = tuple(float(b) for b in self.line_search_betas)
        if not betas or any(not 0.0 < b <= 1.0 for b in betas):
            raise ValidationError("line search betas must lie in (0, 1]")
        object.__setattr__(self, "line_search_betas", betas)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_seconds / self.dt))


@dataclass(frozen=True, eq=False)
class IlqrSolution:
    """Nominal trajectory and local policy u = u_k + gains[k] (zeta - x_k).

    ``feedback_gains[k]`` is du/dzeta, so on a linear problem gains[0] is
    close to -K_lqr.
    """

    nominal_states: np.ndarray
    nominal_inputs: np.ndarray
    feedback_gains: np.ndarray
    cost: float
    converged: bool
    iterations: int
    history: np.ndarray
    dt: float

    def cost_to_go(self, cost: QuadraticCost, p_terminal: np.ndarray) -> np.ndarray:
        """V_k along the nominal trajectory (same quadrature as the solver)."""
        xs, us = self.nominal_states, self.nominal_inputs
        stage = self.dt * (np.einsum("ki,ij,kj->k", xs[:-1], cost.q, xs[:-1]) + cost.r * us**2)
        tail = float(xs[-1] @ p_terminal @ xs[-1])
        return tail + np.concatenate([np.cumsum(stage[::-1])[::-1], [0.0]])


class OptimalControl:
    """iLQR solver bound to a system and cost, caching the LQR terminal data."""

    def __init__(self, nf: NormalFormSystem, cost: QuadraticCost, cfg: IlqrConfig = IlqrConfig()):
        if cost.q.shape != (nf.n, nf.n):
            raise ValidationError(f"Q must be {nf.n}x{nf.n}")
        self.nf = nf
        self.cost = cost
        self.cfg = cfg
        self.model = linearize_physical(nf)
        self.k_lqr, self.p_lqr = lqr_gain(self.model, cost.q, cost.r)
        self._betas = np.array(cfg.line_search_betas)

    def _run(self, zeta0, uff, kfb, xref):
        cfg = self.cfg
        return kernels.ilqr_core(self.nf.kind, self.nf.gamma, self.nf.params, zeta0, self.cost.q, self.cost.r,
                                 self.p_lqr, cfg.dt, uff, kfb, xref, cfg.max_iters, cfg.cost_tol,
                                 cfg.regularization, self._betas, cfg.escape_bound, cfg.jac_step)

    def solve(self, zeta0, warm: Optional[IlqrSolution] = None) -> IlqrSolution:
        """Cold start is the LQR rollout; if that escapes, a zero-input rollout."""
        zeta0 = as_zeta(zeta0).astype(float)
        if zeta0.shape != (self.nf.n,) or not np.all(np.isfinite(zeta0)):
            raise ValidationError("zeta0 must be a finite state vector")
        n_steps, n = self.cfg.n_steps, self.nf.n
        starts = []
        if warm is not None and warm.nominal_inputs.shape[0] == n_steps:
            starts.append((warm.nominal_inputs, warm.feedback_gains, warm.nominal_states[:-1]))
        starts.append((np.zeros(n_steps), np.tile(-self.k_lqr.k, (n_steps, 1)), np.zeros((n_steps, n))))
        starts.append((np.zeros(n_steps), np.zeros((n_steps, n)), np.zeros((n_steps, n))))
        for uff, kfb, xref in starts:
            xs, us, gains, total, conv, iters, status, hist = self._run(zeta0, uff, kfb, xref)
            if status == kernels.STATUS_OK:
                break
        else:
            raise Diverged("every initial rollout left the working box")
        if not (np.isfinite(total) and np.all(np.isfinite(gains))):
            raise Diverged("iLQR produced non-finite cost or gains")
        hist = hist[: iters + 1]
        return IlqrSolution(xs, us, gains, float(total), bool(conv), int(iters), hist, self.cfg.dt)

    def sensitivity(self, sol: IlqrSolution) -> np.ndarray:
        """du_0/dzeta_0 of the converged solution, including second-order dynamics terms.

        The Gauss-Newton gains of the iLQR sweep drop the costate-weighted
        curvature of the dynamics, which matters away from the origin. Falls
        back to them when the full second-order input Hessian is not positive.
        """
        cfg = self.cfg
        gains, ok = kernels.ddp_gains(self.nf.kind, self.nf.gamma, self.nf.params, sol.nominal_states,
                                      sol.nominal_inputs, self.cost.q, self.cost.r, self.p_lqr, cfg.dt,
                                      cfg.jac_step, cfg.hessian_step)
        if not ok or not np.all(np.isfinite(gains[0])):
            return sol.feedback_gains[0].copy()
        return gains[0].copy()

    def query(self, zeta) -> tuple[float, np.ndarray]:
        """(u*(zeta), du*/dzeta)."""
        sol = self.solve(zeta)
        return float(sol.nominal_inputs[0]), self.sensitivity(sol)


def ilqr_solve(nf: NormalFormSystem, cost: QuadraticCost, zeta0, cfg: IlqrConfig = IlqrConfig()) -> IlqrSolution:
    return OptimalControl(nf, cost, cfg).solve(zeta0)


def optimal_control_query(nf: NormalFormSystem, cost: QuadraticCost, zeta, cfg: IlqrConfig = IlqrConfig()):
    """(u*(zeta), du*/dzeta) from the first step of the converged iLQR solution."""
    return OptimalControl(nf, cost, cfg).query(zeta)


@dataclass(eq=False)
class DecreaseReport:
    times: np.ndarray
    values: np.ndarray  # V re-solved at the sample states
    vdot: np.ndarray  # forward differences of values
    rate_bound: np.ndarray  # -lambda_min(Q) * mean ||zeta||^2 over each interval
    stage_rate: np.ndarray  # -mean(zeta^T Q zeta + r u^2) over each interval
    optimality_gap: np.ndarray  # |V(zeta_k) - cost-to-go_k| / cost-to-go_k
    slack: float
    holds: bool = field(default=False)


def value_decrease_check(nf: NormalFormSystem, cost: QuadraticCost, zeta0, cfg: IlqrConfig = IlqrConfig(),
                         stride: int = 5, n_samples: int = 20, slack: float = 0.1,
                         solver: Optional[OptimalControl] = None) -> DecreaseReport:
    """Numerical V_dot along the iLQR trajectory from re-solved values.

    V is re-solved at every ``stride``-th nominal state; V_dot is the forward
    difference, checked against V_dot <= -(1 - slack) lambda_min(Q) ||zeta||^2
    averaged over each interval.
    """
    oc = solver or OptimalControl(nf, cost, cfg)
    sol = oc.solve(zeta0)
    xs, us = sol.nominal_states, sol.nominal_inputs
    idx = np.arange(0, min(n_samples * stride, us.shape[0]) + 1, stride)
    ctg = sol.cost_to_go(cost, oc.p_lqr)
    values = np.array([ctg[0]] + [oc.solve(xs[k]).cost for k in idx[1:]])
    dt = cfg.dt
    lam_min = float(np.min(np.linalg.eigvalsh(cost.q)))
    vdot = np.diff(values) / (stride * dt)
    sq = np.einsum("ki,ki->k", xs, xs)
    stage = np.einsum("ki,ij,kj->k", xs[:-1], cost.q, xs[:-1]) + cost.r * us**2
    bound = np.array([-lam_min * np.mean(sq[a:b]) for a, b in zip(idx[:-1], idx[1:])])
    rate = np.array([-np.mean(stage[a:b]) for a, b in zip(idx[:-1], idx[1:])])
    with np.errstate(invalid="ignore", divide="ignore"):
        gap = np.where(ctg[idx] > 0, np.abs(values - ctg[idx]) / ctg[idx], 0.0)
    holds = bool(np.all(vdot <= (1.0 - slack) * bound + 1e-12))
    return DecreaseReport(dt * idx, values, vdot, bound, rate, gap, slack, holds)


def mpc_rollout(nf: NormalFormSystem, cost: QuadraticCost, zeta0, t_final: float, cfg: IlqrConfig = IlqrConfig(),
                replan_every: int = 10, solver: Optional[OptimalControl] = None):
    """Closed loop under the iLQR policy, re-solved every ``replan_every`` steps.

    Between re-solves the local policy u = u_k + G_k (zeta - x_k) is applied
    with a zero-order hold over each RK4 step. Returns a runtime Trajectory.
    """
    from .runtime import Trajectory

    if replan_every < 1:
        raise ValidationError("replan_every must be >= 1")
    oc = solver or OptimalControl(nf, cost, cfg)
    dt = cfg.dt
    n_steps = int(round(t_final / dt))
    x = as_zeta(zeta0).astype(float)
    states = [x]
    inputs = []
    status = "ok"
    sol = None
    offset = 0
    for k in range(n_steps):
        if k % replan_every == 0:
            sol = oc.solve(x, warm=_shift(sol, offset) if sol is not None else None)
            offset = 0
        j = min(offset, sol.nominal_inputs.shape[0] - 1)
        u = sol.nominal_inputs[j] + sol.feedback_gains[j] @ (x - sol.nominal_states[j])
        inputs.append(float(u))
        x = kernels.rk4_step(nf.kind, nf.gamma, nf.params, x, float(u), dt)
        offset += 1
        if not np.all(np.isfinite(x)):
            status = "nonfinite"
            break
        states.append(x)
        if np.linalg.norm(x) > cfg.escape_bound:
            status = "escaped"
            break
    inputs.append(inputs[-1] if inputs else 0.0)
    states = np.array(states)
    inputs = np.array(inputs[: states.shape[0]])
    return Trajectory(dt * np.arange(states.shape[0]), states, inputs, {}, status, "ilqr")


def _shift(sol: IlqrSolution, offset: int) -> IlqrSolution:
    """Warm start advanced by ``offset`` steps, padded with the last entries."""
    if offset == 0:
        return sol
    n = sol.nominal_inputs.shape[0]
    idx = np.minimum(np.arange(offset, offset + n), n - 1)
    xs = sol.nominal_states[np.minimum(np.arange(offset, offset + n + 1), n)]
    return IlqrSolution(xs, sol.nominal_inputs[idx], sol.feedback_gains[idx], sol.cost, sol.converged,
                        sol.iterations, sol.history, sol.dt)


def lqr_controller_gain(nf: NormalFormSystem, cost: QuadraticCost) -> GainMatrix:
    """Continuous LQR gain on the physical-input linearisation (the baseline)."""
    return lqr_gain(linearize_physical(nf), cost.q, cost.r)[0]
