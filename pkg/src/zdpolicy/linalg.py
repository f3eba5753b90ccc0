"""Dense linear algebra for the single-input pipeline.

Finite-difference Jacobians, linearisation in normal-form coordinates,
eigen-decomposition, Ackermann pole placement, a Newton-Kleinman CARE
solver and controllability tests.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import BadPoles, NoConvergence, NonFinite, NoStabilizingSolution, Uncontrollable

FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class LinearModel:
    """zeta_dot = A zeta + B u with the normal-form block slices cached.

    ``a_eta1``, ``a_eta2`` and ``a_z`` are None for models that were not
    built from a normal-form system.
    """

    a: np.ndarray
    b: np.ndarray
    gamma: int = 0
    a_eta1: Optional[np.ndarray] = None
    a_eta2: Optional[np.ndarray] = None
    a_z: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @classmethod
    def from_matrices(cls, a, b, gamma: int = 0) -> "LinearModel":
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise ValueError(f"incompatible shapes A{a.shape} B{b.shape}")
        if gamma <= 0:
            return cls(a, b, 0)
        a_eta2 = a[gamma:, 1] if gamma >= 2 else np.zeros(a.shape[0] - gamma)
        return cls(a, b, gamma, a[gamma:, 0].copy(), np.array(a_eta2, copy=True), a[gamma:, gamma:].copy())


@dataclass(frozen=True, eq=False)
class GainMatrix:
    """Feedback row for u = -k zeta."""

    k: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.k)):
            raise NonFinite("gain has non-finite entries")

    def __call__(self, zeta) -> float:
        return float(-self.k @ np.asarray(zeta, dtype=float))


def jacobian_fd(f: Callable, x0, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x0), dtype=float))
    jac = np.empty((f0.shape[0], x0.shape[0]))
    for j in range(x0.shape[0]):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += step
        xm[j] -= step
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        jac[:, j] = (fp - fm) / (2.0 * step)
    if not np.all(np.isfinite(jac)) or not np.all(np.isfinite(f0)):
        raise NonFinite("non-finite value while differencing")
    return jac


def linearize_about_origin(nf, step: float = FD_STEP) -> LinearModel:
    """Linearisation after feedback linearisation: integrator chain plus omega blocks.

    ``B`` is the unit vector on eta_gamma, so ``u`` here is the auxiliary
    input, not the physical one (see :func:`linearize_physical`).
    """
    n, gamma = nf.n, nf.gamma
    origin = np.zeros(n)
    dom = jacobian_fd(nf.omega, origin, step)
    a = np.zeros((n, n))
    a[:gamma, :gamma] = nf.f_mat
    a[gamma:, :] = dom
    b = np.zeros(n)
    b[gamma - 1] = 1.0
    return LinearModel.from_matrices(a, b, gamma)


def linearize_physical(nf, step: float = FD_STEP) -> LinearModel:
    """Linearisation with the physical input v (used by LQR and iLQR)."""
    origin = np.zeros(nf.n)
    a = jacobian_fd(lambda zeta: nf.rhs(zeta, 0.0), origin, step)
    b = nf.input_vector(origin)
    return LinearModel.from_matrices(a, b, nf.gamma)


def physical_to_aux_gain(nf, k_phys, step: float = FD_STEP) -> GainMatrix:
    """Express v = -k_phys zeta as an auxiliary-input gain on the linearisation.

    The linearised feedback-linearising transform is u = a_row zeta + ghat v,
    so u = -(ghat k_phys - a_row) zeta.
    """
    phys = linearize_physical(nf, step)
    row = phys.a[nf.gamma - 1]
    ghat = phys.b[nf.gamma - 1]
    return GainMatrix(ghat * np.asarray(k_phys, dtype=float) - row)


def _order(vals: np.ndarray) -> np.ndarray:
    return np.lexsort((np.round(vals.imag, 12), np.round(vals.real, 12)))


def eig_decompose(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs sorted by ascending real part, then imaginary part.

    Eigenvectors are unit-norm columns with the largest-modulus entry made
    real positive, so the output is deterministic.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("square matrix required")
    try:
        vals, vecs = np.linalg.eig(m)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    idx = _order(vals)
    vals = vals[idx]
    vecs = vecs[:, idx].astype(complex)
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        col = col / np.linalg.norm(col)
        pivot = col[np.argmax(np.abs(col))]
        vecs[:, j] = col * (abs(pivot) / pivot)
    return vals, vecs


def controllability_matrix(model: LinearModel) -> np.ndarray:
    a, b = model.a, model.b
    cols = [b]
    for _ in range(model.n - 1):
        cols.append(a @ cols[-1])
    return np.column_stack(cols)


def numerical_rank(m, rtol: float = 1e-8) -> int:
    s = np.linalg.svd(np.atleast_2d(m), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def controllability_rank(model: LinearModel) -> int:
    return numerical_rank(controllability_matrix(model))


def place_poles(model: LinearModel, poles) -> GainMatrix:
    """Ackermann's formula: K = e_n^T C^-1 phi(A) for distinct negative real poles."""
    poles = np.asarray(poles)
    if np.iscomplexobj(poles):
        if np.any(np.abs(poles.imag) > 0):
            raise BadPoles("complex poles are not supported")
        poles = poles.real
    poles = poles.astype(float)
    n = model.n
    if poles.shape != (n,):
        raise BadPoles(f"need {n} poles, got {poles.shape[0] if poles.ndim else 0}")
    if np.any(poles >= 0.0):
        raise BadPoles("poles must be strictly negative")
    if np.unique(poles).shape[0] != n:
        raise BadPoles("poles must be distinct")
    ctrb = controllability_matrix(model)
    if numerical_rank(ctrb) < n:
        raise Uncontrollable("controllability matrix is rank deficient")
    coeffs = np.poly(poles)
    phi = np.zeros((n, n))
    for c in coeffs:
        phi = phi @ model.a + c * np.eye(n)
    last = np.linalg.solve(ctrb.T, np.eye(n)[:, -1])
    return GainMatrix(last @ phi)


def care_residual(model: LinearModel, q, r: float, p) -> float:
    a, b = model.a, model.b.reshape(-1, 1)
    res = a.T @ p + p @ a - (p @ b) @ (b.T @ p) / r + q
    return float(np.linalg.norm(res))


def lqr_gain(model: LinearModel, q, r: float, max_iters: int = 100, tol: float = 1e-13):
    """Continuous LQR via Newton-Kleinman iteration.

    Seeded with a pole-placement gain; each step solves the Lyapunov
    equation (A - BK)^T P + P (A - BK) + Q + r K^T K = 0.
    Returns ``(GainMatrix, P)``.
    """
    q = np.asarray(q, dtype=float)
    if r <= 0.0:
        raise ValueError("r must be positive")
    if np.any(np.linalg.eigvalsh(0.5 * (q + q.T)) <= 0.0):
        raise ValueError("Q must be positive definite")
    a, b = model.a, model.b
    n = model.n
    k = _stabilizing_seed(model)
    p_prev = None
    for _ in range(max_iters):
        acl = a - np.outer(b, k)
        try:
            p = scipy.linalg.solve_continuous_lyapunov(acl.T, -(q + r * np.outer(k, k)))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NoStabilizingSolution(str(exc)) from exc
        p = 0.5 * (p + p.T)
        k = (b @ p) / r
        if p_prev is not None and np.linalg.norm(p - p_prev) <= tol * max(1.0, np.linalg.norm(p)):
            break
        p_prev = p
    else:
        raise NoStabilizingSolution("Newton-Kleinman did not converge")
    acl = a - np.outer(b, k)
    if not np.all(np.linalg.eigvals(acl).real < 0.0) or not np.all(np.isfinite(p)):
        raise NoStabilizingSolution("closed loop is not Hurwitz")
    return GainMatrix(k), p


def _stabilizing_seed(model: LinearModel) -> np.ndarray:
    """Gain placing poles left of the open-loop spectrum."""
    n = model.n
    if np.all(np.linalg.eigvals(model.a).real < 0.0):
        return np.zeros(n)
    shift = max(1.0, float(np.max(np.abs(np.linalg.eigvals(model.a)))))
    poles = -shift * (1.0 + np.arange(n) / n)
    try:
        return place_poles(model, poles).k
    except Uncontrollable as exc:
        raise NoStabilizingSolution("cannot seed Newton-Kleinman: " + str(exc)) from exc
