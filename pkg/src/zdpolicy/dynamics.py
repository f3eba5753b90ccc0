"""Control-affine systems, the damped cartpole, and normal-form coordinates.

A :class:`NormalFormSystem` describes the dynamics after the actuation
decomposition, zeta = (eta, z), with

    eta_dot = fhat(zeta) + ghat(zeta) v,    z_dot = omega(eta, z),

where ``fhat``/``ghat`` have the integrator-chain structure so that
feedback linearisation turns the eta block into (F, G).
"""

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import kernels
from .errors import AssumptionViolated, SingularDecoupling, ValidationError
from .linalg import FD_STEP, jacobian_fd


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """x_dot = drift(x) + actuation(x) v with scalar v."""

    n: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __call__(self, x, v: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.drift(x) + self.actuation(x) * v


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 1.0
    gravity: float = 9.8
    damping_threshold: float = 1e-3

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "gravity"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if not np.isfinite(self.damping_threshold) or self.damping_threshold < 0.0:
            raise ValidationError("damping_threshold must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.cart_mass, self.pole_mass, self.pole_length, self.gravity, self.damping_threshold])


@dataclass(frozen=True, eq=False)
class NzState:
    eta: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta", np.atleast_1d(np.asarray(self.eta, dtype=float)))
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))

    @classmethod
    def split(cls, zeta, gamma: int) -> "NzState":
        zeta = np.asarray(zeta, dtype=float)
        return cls(zeta[:gamma], zeta[gamma:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta, self.z])


ZetaLike = Union[NzState, np.ndarray, list, tuple]


def as_zeta(zeta: ZetaLike) -> np.ndarray:
    if isinstance(zeta, NzState):
        return zeta.as_vector()
    return np.asarray(zeta, dtype=float)


@dataclass(frozen=True, eq=False)
class NormalFormSystem:
    """Dynamics in (eta, z) coordinates backed by a compiled kernel.

    ``kind``/``params`` select the kernel (see :mod:`kernels`); ``to_nz`` and
    ``from_nz`` are the diffeomorphism and its inverse from the physical
    state.
    """

    gamma: int
    nz: int
    kind: int
    params: np.ndarray
    to_nz: Callable[[np.ndarray], np.ndarray]
    from_nz: Callable[[np.ndarray], np.ndarray]
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.gamma + self.nz

    @property
    def f_mat(self) -> np.ndarray:
        return np.eye(self.gamma, k=1)

    @property
    def g_vec(self) -> np.ndarray:
        g = np.zeros(self.gamma)
        g[-1] = 1.0
        return g

    def rhs(self, zeta: ZetaLike, v: float) -> np.ndarray:
        return kernels.zeta_rhs(self.kind, self.gamma, self.params, as_zeta(zeta), float(v))

    def input_vector(self, zeta: ZetaLike) -> np.ndarray:
        return kernels.input_vector(self.kind, self.gamma, self.params, as_zeta(zeta))

    def omega(self, zeta: ZetaLike) -> np.ndarray:
        return kernels.omega(self.kind, self.gamma, self.params, as_zeta(zeta))

    def omega_jacobian(self, zeta: ZetaLike) -> np.ndarray:
        return kernels.omega_jacobian(self.kind, self.gamma, self.params, as_zeta(zeta))

    def fhat_ghat(self, zeta: ZetaLike) -> tuple[np.ndarray, np.ndarray]:
        return kernels.fhat_ghat(self.kind, self.gamma, self.params, as_zeta(zeta))

    def fl_drift(self, zeta: ZetaLike) -> np.ndarray:
        """Drift after feedback linearisation: (F eta, omega)."""
        zeta = as_zeta(zeta)
        return np.concatenate([self.f_mat @ zeta[: self.gamma], self.omega(zeta)])


# --------------------------------------------------------------------------
# cartpole
# --------------------------------------------------------------------------


def cartpole_system(params: CartpoleParams = CartpoleParams()) -> ControlAffineSystem:
    """Cartpole in x = (x, theta, xdot, thetadot), theta = 0 upright, force on the cart.

    Cart damping d(xdot) = xdot once |xdot| reaches the threshold, zero below.
    """
    mc, mp, ln, g = params.cart_mass, params.pole_mass, params.pole_length, params.gravity
    thr = params.damping_threshold

    def drift(x):
        _, th, xd, thd = x
        s, c = np.sin(th), np.cos(th)
        den = mc + mp * s * s
        d = kernels.cartpole_damping(float(xd), thr)
        xdd = (-d + mp * ln * s * thd * thd - mp * g * s * c) / den
        thdd = (g * s - c * xdd) / ln
        return np.array([xd, thd, xdd, thdd])

    def actuation(x):
        s, c = np.sin(x[1]), np.cos(x[1])
        den = mc + mp * s * s
        return np.array([0.0, 0.0, 1.0 / den, -c / (ln * den)])

    return ControlAffineSystem(4, drift, actuation, "cartpole")


def cartpole_energy(params: CartpoleParams, x) -> float:
    """Total mechanical energy (kinetic + gravitational) in physical coordinates."""
    _, th, xd, thd = np.asarray(x, dtype=float)
    mc, mp, ln, g = params.cart_mass, params.pole_mass, params.pole_length, params.gravity
    kinetic = 0.5 * (mc + mp) * xd**2 + mp * ln * xd * thd * np.cos(th) + 0.5 * mp * ln**2 * thd**2
    return float(kinetic + mp * g * ln * np.cos(th))


def cartpole_normal_form(params: CartpoleParams = CartpoleParams()) -> NormalFormSystem:
    """eta = (x, xdot), z = (theta, p_theta), p_theta the conjugate momentum of theta.

    The input only forces the cart coordinate, so p_theta_dot = dL/dtheta is
    input-free.
    """
    mp, ln = params.pole_mass, params.pole_length

    def to_nz(x):
        x = np.asarray(x, dtype=float)
        pos, th, xd, thd = x
        return np.array([pos, xd, th, mp * ln * ln * thd + mp * ln * xd * np.cos(th)])

    def from_nz(zeta):
        pos, xd, th, pth = as_zeta(zeta)
        return np.array([pos, th, xd, (pth - mp * ln * xd * np.cos(th)) / (mp * ln * ln)])

    return NormalFormSystem(2, 2, kernels.CARTPOLE, params.as_array(), to_nz, from_nz, "cartpole",
                            {"params": params})


# --------------------------------------------------------------------------
# linear systems already in normal form
# --------------------------------------------------------------------------


def linear_normal_form(a, b, gamma: int, name: str = "linear") -> NormalFormSystem:
    """Linear system zeta_dot = A zeta + B v whose first gamma rows form an integrator chain.

    Rows ``0..gamma-2`` of A must be the upper shift and only ``B[gamma-1]``
    may be nonzero; the physical state is zeta itself. ``gamma == n`` (no
    zero coordinates, e.g. the double integrator) is allowed.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape != (n,) or not 1 <= gamma <= n:
        raise ValidationError("inconsistent linear system dimensions")
    shift = np.eye(n, k=1)[: gamma - 1]
    if not np.allclose(a[: gamma - 1], shift, atol=0.0):
        raise ValidationError("leading rows of A must be an integrator chain")
    mask = np.ones(n, dtype=bool)
    mask[gamma - 1] = False
    if np.any(b[mask] != 0.0) or b[gamma - 1] == 0.0:
        raise ValidationError("B must act only on eta_gamma")
    params = np.concatenate([a.ravel(), b])

    def ident(x):
        return np.array(as_zeta(x), dtype=float, copy=True)

    return NormalFormSystem(gamma, n - gamma, kernels.LINEAR, params, ident, ident, name,
                            {"a": a.copy(), "b": b.copy()})


def linear_system(a, b, name: str = "linear") -> ControlAffineSystem:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    return ControlAffineSystem(a.shape[0], lambda x: a @ x, lambda x: b, name)


def system_of(nf: NormalFormSystem) -> ControlAffineSystem:
    """Physical-coordinate system matching a normal-form system built here."""
    if nf.kind == kernels.CARTPOLE:
        return cartpole_system(nf.meta["params"])
    return linear_system(nf.meta["a"], nf.meta["b"], nf.name)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def annihilation_residual(nf: NormalFormSystem, sys: ControlAffineSystem, x, step: float = FD_STEP) -> float:
    """|| dPhi_z/dx g_x(x) ||, zero when the z coordinates are input-free."""
    x = np.asarray(x, dtype=float)
    jac = jacobian_fd(lambda xx: np.asarray(nf.to_nz(xx))[nf.gamma:], x, step)
    return float(np.linalg.norm(jac @ sys.actuation(x)))


def decoupling(nf: NormalFormSystem, zeta: ZetaLike) -> float:
    """L_g L_f^(gamma-1) of the output eta_1."""
    _, gh = nf.fhat_ghat(zeta)
    return float(gh[-1])


def feedback_linearize(nf: NormalFormSystem, zeta: ZetaLike, u_aux: float, tol: float = 1e-9) -> float:
    """Physical input v giving eta_1^(gamma) = u_aux."""
    fh, gh = nf.fhat_ghat(zeta)
    if abs(gh[-1]) < tol:
        raise SingularDecoupling(f"|L_g L_f^(gamma-1)| = {abs(gh[-1]):.3e} below {tol:g}")
    return float((u_aux - fh[-1]) / gh[-1])


def zero_dynamics_rhs(nf: NormalFormSystem, psi, z) -> np.ndarray:
    """omega(psi(z), z); ``psi`` is a callable or anything with ``.value``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    eta = psi.value(z) if hasattr(psi, "value") else np.asarray(psi(z), dtype=float)
    return nf.omega(np.concatenate([np.atleast_1d(eta), z]))


def check_assumption_1(nf: NormalFormSystem, zeta: ZetaLike, tol: float = 1e-8) -> float:
    """Largest |d omega / d eta_i| over i >= 3; raises if above ``tol``.

    Vacuous (returns 0) when gamma <= 2.
    """
    if nf.gamma <= 2:
        return 0.0
    jac = jacobian_fd(nf.omega, as_zeta(zeta))
    worst = float(np.max(np.abs(jac[:, 2: nf.gamma])))
    if worst > tol:
        raise AssumptionViolated(f"d omega/d eta_i = {worst:.3e} for some i >= 3")
    return worst
