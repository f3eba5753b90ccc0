"""Output tracking, closed-loop simulation, envelope fits and ROA sweeps."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .dynamics import ControlAffineSystem, NormalFormSystem, as_zeta, check_assumption_1, feedback_linearize
from .errors import AllBelowFloor, NonFinite, SingularDecoupling, ValidationError
from .linalg import GainMatrix
from .linear_zdp import P_RUNTIME_TOL

NESTED_FD_STEP = 1e-3
ENVELOPE_FLOOR = 1e-9
DEFAULT_GAINS = (25.0, 10.0)


@dataclass(frozen=True, eq=False)
class ErrorCoords:
    e: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.e))


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    aux: dict = field(default_factory=dict)
    status: str = "ok"
    controller: str = ""

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 0.0

    def state_norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)

    def to_csv(self, path, state_names: Optional[Sequence[str]] = None):
        n = self.states.shape[1]
        names = list(state_names) if state_names else [f"zeta{i}" for i in range(n)]
        cols = ["e_norm", "z_norm", "invariance_residual"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *names, "u", *cols])
            for k in range(len(self)):
                row = [_fmt(self.times[k])] + [_fmt(v) for v in self.states[k]] + [_fmt(self.inputs[k])]
                row += [_fmt(self.aux[c][k]) if c in self.aux else "" for c in cols]
                w.writerow(row)


def _fmt(x) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class ExponentialFit:
    """log||s(t)|| ~ log(m) - lam t by least squares.

    ``envelope_m`` is the smallest M with ||s(t)|| <= M e^(-lam t) ||s(0)||
    over the fitted samples.
    """

    m: float
    lam: float
    rmse: float
    envelope_m: float
    n_samples: int


# --------------------------------------------------------------------------
# error coordinates and tracking
# --------------------------------------------------------------------------


def _lie_chain(nf: NormalFormSystem, psi, depth: int, step: float = NESTED_FD_STEP):
    """Functions h_0 = y, h_{i+1} = L_f h_i along the feedback-linearised drift."""
    gamma = nf.gamma

    def y(zeta):
        return float(zeta[0] - psi.value(zeta[gamma:])[0])

    funcs = [y]
    for _ in range(depth):
        prev = funcs[-1]

        def lie(zeta, prev=prev):
            f0 = nf.fl_drift(zeta)
            grad = np.empty(zeta.shape[0])
            for j in range(zeta.shape[0]):
                zp = zeta.copy()
                zm = zeta.copy()
                zp[j] += step
                zm[j] -= step
                grad[j] = (prev(zp) - prev(zm)) / (2 * step)
            return float(grad @ f0)

        funcs.append(lie)
    return funcs


def _decoupling_fd(nf, func, zeta, step=NESTED_FD_STEP) -> float:
    """d func / d eta_gamma (the input direction after feedback linearisation)."""
    zp = zeta.copy()
    zm = zeta.copy()
    zp[nf.gamma - 1] += step
    zm[nf.gamma - 1] -= step
    return (func(zp) - func(zm)) / (2 * step)


def error_coordinates(nf: NormalFormSystem, psi, zeta) -> ErrorCoords:
    """e = (y, y_dot, ..., y^(gamma-1)) for y = eta_1 - psi_1(z)."""
    zeta = as_zeta(zeta)
    gamma = nf.gamma
    z = zeta[gamma:]
    val, jac, _ = psi.eval_all(z)
    e1 = zeta[0] - val[0]
    if gamma == 1:
        return ErrorCoords(np.array([e1]))
    if gamma == 2:
        return ErrorCoords(np.array([e1, zeta[1] - jac[0] @ nf.omega(zeta)]))
    check_assumption_1(nf, zeta)
    funcs = _lie_chain(nf, psi, gamma - 1)
    return ErrorCoords(np.array([f(zeta) for f in funcs]))


def relative_degree_scalar(nf: NormalFormSystem, psi, zeta) -> float:
    """1 - (d psi_1/dz)(d omega/d eta_2), using the analytic omega Jacobian."""
    zeta = as_zeta(zeta)
    if nf.gamma == 1:
        return 1.0
    grad = psi.grad1(zeta[nf.gamma:])
    return float(1.0 - grad @ nf.omega_jacobian(zeta)[:, 1])


def _normalize_gains(gains, gamma):
    gains = tuple(float(g) for g in gains)
    if len(gains) != gamma:
        raise ValidationError(f"need {gamma} gains, got {len(gains)}")
    return gains


def tracking_controller(nf: NormalFormSystem, psi, gains, zeta, p_tol: float = P_RUNTIME_TOL) -> float:
    """Physical input driving e to zero with y^(gamma) = -sum k_i e_i.

    The auxiliary input is u = (-L_f^gamma y - K e) / L_g L_f^(gamma-1) y.
    Its drift-cancelling part coincides on M_psi with the input that keeps an
    invariant psi's graph invariant.
    """
    zeta = as_zeta(zeta)
    gamma = nf.gamma
    gains = _normalize_gains(gains, gamma)
    arrays = psi.kernel_arrays() if hasattr(psi, "kernel_arrays") else None
    if gamma == 2 and arrays is not None:
        w, b, sizes, act = arrays
        v, p = kernels.zdp_tracking_input(nf.kind, gamma, nf.params, zeta, w, b, sizes, act,
                                          gains[0], gains[1], p_tol)
        if not np.isfinite(v):
            raise SingularDecoupling(f"relative-degree scalar {p:.3e} below {p_tol:g}")
        return float(v)
    if gamma > 2:
        check_assumption_1(nf, zeta)
    funcs = _lie_chain(nf, psi, gamma)
    e = np.array([f(zeta) for f in funcs[:gamma]])
    drift = funcs[gamma](zeta)
    p = _decoupling_fd(nf, funcs[gamma - 1], zeta)
    if abs(p) < p_tol:
        raise SingularDecoupling(f"relative-degree scalar {p:.3e} below {p_tol:g}")
    u_aux = (-drift - np.dot(gains, e)) / p
    return feedback_linearize(nf, zeta, u_aux)


def manifold_feedforward(nf: NormalFormSystem, psi, z) -> float:
    """Auxiliary input keeping (psi(z), z) tangent to M_psi: d psi_gamma/dz . omega."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    val, jac, _ = psi.eval_all(z)
    zeta = np.concatenate([val, z])
    return float(jac[-1] @ nf.omega(zeta))


def project_to_zeroing_manifold(nf: NormalFormSystem, psi, z, tol: float = 1e-13, max_iters: int = 50):
    """Point (eta, z) with e(eta, z) = 0, by Newton on eta from eta = psi(z)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    gamma = nf.gamma
    eta = np.array(psi.value(z), dtype=float)
    eta[0] = psi.value(z)[0]
    for _ in range(max_iters):
        zeta = np.concatenate([eta, z])
        e = error_coordinates(nf, psi, zeta).e
        if np.max(np.abs(e)) < tol:
            break
        jac = np.empty((gamma, gamma))
        h = 1e-7
        for j in range(gamma):
            zp = zeta.copy()
            zm = zeta.copy()
            zp[j] += h
            zm[j] -= h
            jac[:, j] = (error_coordinates(nf, psi, zp).e - error_coordinates(nf, psi, zm).e) / (2 * h)
        eta = eta - np.linalg.solve(jac, e)
    return np.concatenate([eta, z])


# --------------------------------------------------------------------------
# controllers
# --------------------------------------------------------------------------


class Controller:
    name = "controller"

    def __call__(self, state) -> float:
        raise NotImplementedError

    def kernel_spec(self):
        return None


_EMPTY = np.zeros(0)
_EMPTY_SIZES = np.zeros(1, dtype=np.int64)


class ZeroController(Controller):
    name = "zero"

    def __call__(self, state) -> float:
        return 0.0

    def kernel_spec(self):
        return (kernels.CTRL_ZERO, _EMPTY, _EMPTY, _EMPTY, _EMPTY_SIZES, 0, 0.0, 0.0, 0.0)


class LinearStateFeedback(Controller):
    """v = -K zeta (the LQR baseline)."""

    def __init__(self, gain: GainMatrix, name: str = "lqr"):
        self.gain = gain
        self.name = name

    def __call__(self, state) -> float:
        return self.gain(state)

    def kernel_spec(self):
        return (kernels.CTRL_LINEAR, np.asarray(self.gain.k, dtype=float), _EMPTY, _EMPTY, _EMPTY_SIZES, 0,
                0.0, 0.0, 0.0)


class TrackingController(Controller):
    """Drives eta_1 -> psi_1(z) by output linearisation with PD error gains."""

    def __init__(self, nf: NormalFormSystem, psi, gains=DEFAULT_GAINS, name: str = "zdp",
                 p_tol: float = P_RUNTIME_TOL):
        self.nf = nf
        self.psi = psi
        self.gains = _normalize_gains(gains, nf.gamma)
        self.name = name
        self.p_tol = p_tol

    def __call__(self, state) -> float:
        return tracking_controller(self.nf, self.psi, self.gains, state, self.p_tol)

    def kernel_spec(self):
        arrays = self.psi.kernel_arrays() if hasattr(self.psi, "kernel_arrays") else None
        if arrays is None or self.nf.gamma != 2:
            return None
        w, b, sizes, act = arrays
        return (kernels.CTRL_ZDP, _EMPTY, w, b, sizes, act, self.gains[0], self.gains[1], self.p_tol)


class FunctionController(Controller):
    def __init__(self, fn: Callable, name: str = "custom"):
        self.fn = fn
        self.name = name

    def __call__(self, state) -> float:
        return float(self.fn(state))


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


def simulate(system, controller, init, t_final: float, dt: float, escape_bound: float = 50.0,
             strict: bool = True, use_kernel: bool = True) -> Trajectory:
    """Fixed-step RK4 with the feedback re-evaluated at every stage.

    ``system`` is a :class:`NormalFormSystem` (state zeta) or a
    :class:`ControlAffineSystem` (physical state). Stops early when the state
    norm exceeds ``escape_bound`` (status "escaped"). A non-finite state
    raises :class:`NonFinite` when ``strict``; otherwise it is recorded as
    status "nonfinite".
    """
    if dt <= 0.0 or t_final < 0.0:
        raise ValidationError("need dt > 0 and t_final >= 0")
    if not callable(controller):
        raise ValidationError("controller must be callable")
    n_steps = int(round(t_final / dt))
    x0 = as_zeta(init).astype(float)
    name = getattr(controller, "name", "custom")
    spec = controller.kernel_spec() if (use_kernel and isinstance(controller, Controller)) else None
    if isinstance(system, NormalFormSystem) and spec is not None:
        states, inputs, status, done = kernels.simulate_closed_loop(
            system.kind, system.gamma, system.params, *spec, x0, float(dt), n_steps, float(escape_bound))
        status_name = {kernels.STATUS_OK: "ok", kernels.STATUS_ESCAPED: "escaped",
                       kernels.STATUS_NONFINITE: "nonfinite"}[int(status)]
        last = done if status_name == "ok" else done + 1
        if status_name == "escaped":
            states, inputs = states[:last], inputs[:last]
        else:
            states, inputs = states[: done + 1], inputs[: done + 1]
        times = dt * np.arange(states.shape[0])
        if status_name == "nonfinite" and strict:
            raise NonFinite(f"state became non-finite after t = {times[-1]:.4g}")
        return Trajectory(times, states, inputs, {}, status_name, name)

    if isinstance(system, NormalFormSystem):
        def field_fn(x, v):
            return system.rhs(x, v)
    elif isinstance(system, ControlAffineSystem):
        field_fn = system
    else:
        raise ValidationError("system must be NormalFormSystem or ControlAffineSystem")

    def closed(x):
        v = float(controller(x))
        return np.asarray(field_fn(x, v), dtype=float), v

    states = [x0]
    inputs = []
    status_name = "ok"
    x = x0
    for _ in range(n_steps):
        try:
            k1, v = closed(x)
            k2, _ = closed(x + 0.5 * dt * k1)
            k3, _ = closed(x + 0.5 * dt * k2)
            k4, _ = closed(x + dt * k3)
        except SingularDecoupling:
            if strict:
                raise
            inputs.append(np.nan)
            status_name = "nonfinite"
            break
        inputs.append(v)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            status_name = "nonfinite"
            break
        states.append(x)
        if np.linalg.norm(x) > escape_bound:
            status_name = "escaped"
            break
    if status_name == "ok":
        try:
            inputs.append(float(controller(x)))
        except SingularDecoupling:
            inputs.append(np.nan)
    elif len(inputs) < len(states):
        inputs.append(np.nan)
    states = np.array(states)
    inputs = np.array(inputs[: len(states)])
    times = dt * np.arange(states.shape[0])
    if status_name == "nonfinite" and strict:
        raise NonFinite(f"state became non-finite after t = {times[-1]:.4g}")
    return Trajectory(times, states, inputs, {}, status_name, name)


def annotate(traj: Trajectory, nf: NormalFormSystem, psi) -> Trajectory:
    """Fill e_norm, z_norm and invariance_residual (||eta - psi(z)||) diagnostics."""
    g = nf.gamma
    e_norm = np.empty(len(traj))
    inv = np.empty(len(traj))
    for k, zeta in enumerate(traj.states):
        e_norm[k] = np.linalg.norm(error_coordinates(nf, psi, zeta).e)
        inv[k] = np.linalg.norm(zeta[:g] - psi.value(zeta[g:]))
    traj.aux["e_norm"] = e_norm
    traj.aux["z_norm"] = np.linalg.norm(traj.states[:, g:], axis=1)
    traj.aux["invariance_residual"] = inv
    return traj


def fit_exponential_envelope(traj, signal="state", floor: float = ENVELOPE_FLOOR) -> ExponentialFit:
    """Least-squares fit of log||s(t)|| against t over samples above ``floor``.

    ``signal`` is an aux key ("e_norm", "z_norm", ...), "state", an array of
    norms, or a callable taking the trajectory.
    """
    times = np.asarray(traj.times, dtype=float)
    if callable(signal):
        s = np.asarray(signal(traj), dtype=float)
    elif isinstance(signal, str):
        s = traj.state_norms() if signal == "state" else np.asarray(traj.aux[signal], dtype=float)
    else:
        s = np.asarray(signal, dtype=float)
    s = np.abs(s)
    if s.shape[0] == 0 or not s[0] > floor:
        raise AllBelowFloor("signal starts below the fitting floor")
    mask = np.isfinite(s) & (s > floor)
    t, ls = times[mask], np.log(s[mask])
    if t.shape[0] < 2:
        return ExponentialFit(float(s[0]), 0.0, 0.0, 1.0, int(t.shape[0]))
    slope, intercept = np.polyfit(t, ls, 1)
    resid = ls - (intercept + slope * t)
    lam = -float(slope)
    envelope = float(np.max(s[mask] * np.exp(lam * t)) / s[0])
    return ExponentialFit(float(np.exp(intercept)), lam, float(np.sqrt(np.mean(resid**2))), envelope,
                          int(t.shape[0]))


def verify_invariance_along_trajectory(nf: NormalFormSystem, psi, traj: Trajectory) -> dict:
    """Max drift ||eta - psi(z)|| and max tangency residual ||eta_dot - (dpsi/dz) z_dot||."""
    g = nf.gamma
    drift = np.empty(len(traj))
    tangency = np.full(len(traj), np.nan)
    for k, zeta in enumerate(traj.states):
        val, jac, _ = psi.eval_all(zeta[g:])
        drift[k] = np.linalg.norm(zeta[:g] - val)
        if np.isfinite(traj.inputs[k]):
            vel = nf.rhs(zeta, traj.inputs[k])
            tangency[k] = np.linalg.norm(vel[:g] - jac @ vel[g:])
    return {
        "max_drift": float(np.max(drift)),
        "final_drift": float(drift[-1]),
        "max_tangency": float(np.nanmax(tangency)) if np.any(np.isfinite(tangency)) else float("nan"),
        "drift": drift,
        "tangency": tangency,
    }


# --------------------------------------------------------------------------
# region of attraction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RoaGrid:
    theta_min: float = -np.pi
    theta_max: float = np.pi
    theta_dot_min: float = -6.0
    theta_dot_max: float = 6.0
    n_theta: int = 61
    n_theta_dot: int = 61

    def axes(self):
        thetas = np.linspace(self.theta_min, self.theta_max, self.n_theta)
        # wrap to (-pi, pi]
        thetas = np.where(thetas <= -np.pi, thetas + 2 * np.pi, thetas)
        thetas = np.where(thetas > np.pi, thetas - 2 * np.pi, thetas)
        return thetas, np.linspace(self.theta_dot_min, self.theta_dot_max, self.n_theta_dot)


@dataclass(frozen=True)
class SettleConfig:
    t_final: float = 10.0
    dt: float = 0.01
    settle_tol: float = 0.05
    escape_bound: float = 50.0


@dataclass(eq=False)
class RoaResult:
    thetas: np.ndarray
    theta_dots: np.ndarray
    controllers: list
    success: dict  # name -> (n_theta, n_theta_dot) bool
    settle_times: dict  # name -> (n_theta, n_theta_dot) float, NaN on failure

    def count(self, name: str) -> int:
        return int(np.sum(self.success[name]))

    def gained_cells(self, better: str, worse: str) -> list:
        """(theta, theta_dot) cells where ``better`` succeeds and ``worse`` fails."""
        mask = self.success[better] & ~self.success[worse]
        return [(float(self.thetas[i]), float(self.theta_dots[j])) for i, j in zip(*np.nonzero(mask))]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta", "theta_dot", "controller", "success", "settle_time"])
            for i, th in enumerate(self.thetas):
                for j, thd in enumerate(self.theta_dots):
                    for name in self.controllers:
                        st = self.settle_times[name][i, j]
                        w.writerow([_fmt(th), _fmt(thd), name, int(bool(self.success[name][i, j])),
                                    "" if not np.isfinite(st) else _fmt(st)])


def settle_time(traj: Trajectory, tol: float) -> float:
    """First time after which the state norm stays below ``tol``; NaN if never."""
    norms = traj.state_norms()
    above = np.nonzero(~(norms < tol))[0]
    if above.shape[0] == 0:
        return 0.0
    last = above[-1]
    if last == norms.shape[0] - 1:
        return float("nan")
    return float(traj.times[last + 1])


def cartpole_grid_state(nf: NormalFormSystem, theta: float, theta_dot: float) -> np.ndarray:
    """zeta for the physical state x = xdot = 0, (theta, theta_dot)."""
    return np.asarray(nf.to_nz(np.array([0.0, theta, 0.0, theta_dot])), dtype=float)


def roa_sweep(nf: NormalFormSystem, controllers, grid: RoaGrid = RoaGrid(), settle: SettleConfig = SettleConfig(),
              jobs: int = 1, initial_state: Optional[Callable] = None) -> RoaResult:
    """Simulate every (theta, theta_dot) cell under every controller.

    A cell succeeds when the run does not escape and ||zeta(T)|| < settle_tol.
    Cells are independent; ``jobs`` threads run them (the kernels release the GIL).
    """
    if isinstance(controllers, dict):
        named = list(controllers.items())
    else:
        named = [(c.name, c) for c in controllers]
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise ValidationError("controller names must be unique")
    thetas, theta_dots = grid.axes()
    init_fn = initial_state or (lambda th, thd: cartpole_grid_state(nf, th, thd))
    cells = [(i, j) for i in range(thetas.shape[0]) for j in range(theta_dots.shape[0])]

    def run(cell):
        i, j = cell
        zeta0 = init_fn(thetas[i], theta_dots[j])
        out = []
        for _, ctrl in named:
            traj = simulate(nf, ctrl, zeta0, settle.t_final, settle.dt, settle.escape_bound, strict=False)
            ok = traj.status == "ok" and np.linalg.norm(traj.states[-1]) < settle.settle_tol
            out.append((ok, settle_time(traj, settle.settle_tol) if ok else float("nan")))
        return out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    shape = (thetas.shape[0], theta_dots.shape[0])
    success = {n: np.zeros(shape, dtype=bool) for n in names}
    times = {n: np.full(shape, np.nan) for n in names}
    for (i, j), res in zip(cells, results):
        for (n, _), (ok, st) in zip(named, res):
            success[n][i, j] = ok
            times[n][i, j] = st
    return RoaResult(thetas, theta_dots, names, success, times)
