"""Local zero dynamics policy from the linearisation.

Recipe: place distinct negative real poles, pick n_z closed-loop
eigenvectors whose z-projection is invertible, normalise the basis so its
z-block is the identity, and read psi_lin(z) = S_eta^T z off the top block.
The output y = eta_1 - s_eta1^T z then has full relative degree iff
p = 1 - s_eta1^T a_eta2 is nonzero.
"""

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np
import scipy.linalg

from .dynamics import NormalFormSystem, as_zeta
from .errors import DegenerateProjection, RelativeDegreeLoss, ValidationError
from .linalg import FD_STEP, GainMatrix, LinearModel, eig_decompose, jacobian_fd
from .mlp import NetworkPsi, linear_mlp

P_CONSTRUCT_TOL = 1e-8
P_RUNTIME_TOL = 1e-3
_EXHAUSTIVE_LIMIT = 5000


@dataclass(frozen=True, eq=False)
class InvariantSubspace:
    s: np.ndarray  # (n, n_z), bottom block identity
    s_eta: np.ndarray  # (n_z, gamma)
    j: np.ndarray  # (n_z, n_z), A_cl S = S J
    chosen_eigenvalues: np.ndarray
    chosen_indices: tuple = ()

    def residual(self, a_cl) -> float:
        """||A_cl S - S J|| / ||A_cl||."""
        a_cl = np.asarray(a_cl, dtype=float)
        return float(np.linalg.norm(a_cl @ self.s - self.s @ self.j) / np.linalg.norm(a_cl))


@dataclass(frozen=True, eq=False)
class LinearZdp:
    s_eta1: np.ndarray
    c: np.ndarray
    k: GainMatrix
    p: float
    model: LinearModel
    sub: InvariantSubspace

    @property
    def gamma(self) -> int:
        return self.model.gamma

    @property
    def a_cl(self) -> np.ndarray:
        return self.model.a - np.outer(self.model.b, self.k.k)

    def psi(self) -> NetworkPsi:
        return NetworkPsi(linear_mlp(self.sub.s_eta.T))


@dataclass(frozen=True, eq=False)
class EMatrixReport:
    e: np.ndarray
    ladder: np.ndarray  # C A_cl^i B, i = 0..gamma-1
    m_k: np.ndarray
    o_k: np.ndarray
    q_k: np.ndarray
    p: float
    pattern: np.ndarray  # E rebuilt from (m_k, O_k, q_k, p)

    @property
    def rank(self) -> int:
        s = np.linalg.svd(self.e, compute_uv=False)
        return int(np.sum(s > 1e-8 * s[0]))


def _select_columns(proj: np.ndarray, nz: int) -> tuple:
    ncols = proj.shape[1]
    if comb(ncols, nz) <= _EXHAUSTIVE_LIMIT:
        best, best_sv = None, -1.0
        for idx in combinations(range(ncols), nz):
            sv = np.linalg.svd(proj[:, idx], compute_uv=False)[-1]
            if sv > best_sv + 1e-14:
                best, best_sv = idx, sv
        return tuple(best), best_sv
    _, _, piv = scipy.linalg.qr(proj, pivoting=True, mode="economic")
    idx = tuple(sorted(int(i) for i in piv[:nz]))
    return idx, np.linalg.svd(proj[:, idx], compute_uv=False)[-1]


def _slowest_columns(proj: np.ndarray, vals: np.ndarray, nz: int, tol: float) -> tuple:
    """Eigenvalues closest to the imaginary axis first, skipping rank-deficient picks."""
    order = [int(i) for i in np.argsort(-vals, kind="stable")]
    best = None
    for idx in combinations(order, nz):
        sv = np.linalg.svd(proj[:, list(idx)], compute_uv=False)[-1]
        if sv >= tol:
            return tuple(sorted(idx)), sv
        if best is None:
            best = (tuple(sorted(idx)), sv)
    return best


def select_invariant_subspace(a_cl, gamma: int, nz: int, tol: float = 1e-10,
                              prefer: str = "conditioning") -> InvariantSubspace:
    """n_z-dimensional A_cl-invariant subspace that is a graph over z.

    With ``prefer="conditioning"`` picks, among the unit-normalised
    eigenvectors, the n_z whose z-block has the largest smallest singular
    value. ``prefer="slowest"`` takes the slowest eigenvalues whose
    z-projection is invertible (the subspace nearby trajectories approach).
    """
    a_cl = np.asarray(a_cl, dtype=float)
    n = a_cl.shape[0]
    if a_cl.shape != (n, n) or gamma + nz != n:
        raise ValidationError("A_cl must be (gamma + n_z) square")
    vals, vecs = eig_decompose(a_cl)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.any(np.abs(vals.imag) > 1e-9 * scale):
        raise ValidationError("closed-loop eigenvalues must be real")
    vals = vals.real
    if n > 1 and np.min(np.diff(np.sort(vals))) < 1e-9 * scale:
        raise ValidationError("closed-loop eigenvalues must be distinct")
    vecs = vecs.real
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    if prefer == "conditioning":
        idx, sv = _select_columns(vecs[gamma:], nz)
    elif prefer == "slowest":
        idx, sv = _slowest_columns(vecs[gamma:], vals, nz, tol)
    else:
        raise ValidationError(f"unknown selection rule {prefer!r}")
    if sv < tol:
        raise DegenerateProjection(f"best z-projection has smallest singular value {sv:.3e}")
    v = vecs[:, idx]
    vz = v[gamma:]
    vz_inv = np.linalg.inv(vz)
    s = v @ vz_inv
    s[gamma:] = np.eye(nz)
    chosen = vals[list(idx)]
    j = vz @ np.diag(chosen) @ vz_inv
    return InvariantSubspace(s, s[:gamma].T.copy(), j, chosen, idx)


def build_linear_zdp(sub: InvariantSubspace, model: LinearModel, k: GainMatrix) -> LinearZdp:
    gamma = model.gamma
    if gamma <= 0 or model.a_eta2 is None:
        raise ValidationError("model must carry normal-form blocks")
    s_eta1 = sub.s_eta[:, 0].copy()
    c = np.zeros(model.n)
    c[0] = 1.0
    c[gamma:] = -s_eta1
    p = 1.0 if gamma == 1 else float(1.0 - s_eta1 @ model.a_eta2)
    if abs(p) < P_CONSTRUCT_TOL:
        raise RelativeDegreeLoss(f"p = 1 - s_eta1^T a_eta2 = {p:.3e}")
    return LinearZdp(s_eta1, c, k, p, model, sub)


def build_e_matrix(zdp: LinearZdp, a_cl, gamma: int) -> EMatrixReport:
    a_cl = np.asarray(a_cl, dtype=float)
    model = zdp.model
    n = model.n
    rows, ladder = [], []
    row = zdp.c.copy()
    for _ in range(gamma):
        rows.append(row)
        ladder.append(row @ model.b)
        row = row @ a_cl
    e = np.array(rows)

    s = zdp.s_eta1
    a1, a2, az = model.a_eta1, model.a_eta2, model.a_z
    m_k, o_k, q_k = [], [], []
    az_pow = np.eye(az.shape[0])
    for _ in range(gamma + 1):
        o = -s @ az_pow
        o_k.append(o)
        m_k.append(o @ a1)
        q_k.append(o @ (a1 + az @ a2))
        az_pow = az_pow @ az
    pattern = np.zeros((gamma, n))
    for i in range(gamma):
        pattern[i, gamma:] = o_k[i]
        if i == 0:
            pattern[0, 0] = 1.0
            continue
        pattern[i, 0] = m_k[i - 1]
        pattern[i, i] = zdp.p
        for col in range(1, i):
            pattern[i, col] = q_k[i - 1 - col]
    return EMatrixReport(e, np.array(ladder), np.array(m_k[:gamma]), np.array(o_k[:gamma]),
                         np.array(q_k[:gamma]), zdp.p, pattern)


def check_relative_degree_nonlinear(nf: NormalFormSystem, psi1_grad, zeta, step: float = FD_STEP) -> float:
    """1 - (d psi_1/dz)(d omega/d eta_2) at zeta; 1 when gamma == 1."""
    zeta = as_zeta(zeta)
    if nf.gamma == 1:
        return 1.0
    grad = np.asarray(psi1_grad(zeta[nf.gamma:]), dtype=float)
    dom_deta2 = jacobian_fd(nf.omega, zeta, step)[:, 1]
    return float(1.0 - grad @ dom_deta2)


def psi_lin_eval(zdp: LinearZdp, sub: InvariantSubspace, z) -> np.ndarray:
    """eta = S_eta^T z."""
    return sub.s_eta.T @ np.asarray(z, dtype=float)
