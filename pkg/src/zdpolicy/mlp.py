"""Feed-forward networks for psi_theta: forward pass, input derivatives, backprop.

The batched routines are plain numpy. Single-point evaluation with input
Hessians (needed by the tracking controller) goes through
:func:`kernels.mlp_eval`.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ValidationError

ACTIVATIONS = {"relu": kernels.ACT_RELU, "tanh": kernels.ACT_TANH}


@dataclass(frozen=True, eq=False)
class MlpParams:
    layer_weights: tuple
    layer_biases: tuple
    activation: str = "relu"

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.layer_weights)
        bs = tuple(np.array(b, dtype=float).reshape(-1) for b in self.layer_biases)
        if len(ws) == 0 or len(ws) != len(bs):
            raise ValidationError("need one bias per weight matrix")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ValidationError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise ValidationError(f"layer {i} input {w.shape[1]} != previous output {ws[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite entries")
        object.__setattr__(self, "layer_weights", ws)
        object.__setattr__(self, "layer_biases", bs)

    @property
    def input_dim(self) -> int:
        return self.layer_weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layer_weights[-1].shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([self.input_dim] + [w.shape[0] for w in self.layer_weights], dtype=np.int64)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.layer_weights, self.layer_biases))

    def kernel_arrays(self):
        """(weights, biases, sizes, act) in the layout expected by the kernels."""
        weights = np.concatenate([w.ravel() for w in self.layer_weights])
        biases = np.concatenate(self.layer_biases)
        return weights, biases, self.sizes, ACTIVATIONS[self.activation]

    def to_vector(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.layer_weights, self.layer_biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def from_vector(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValidationError(f"expected {self.n_params} parameters, got {vec.shape}")
        ws, bs, off = [], [], 0
        for w, b in zip(self.layer_weights, self.layer_biases):
            ws.append(vec[off: off + w.size].reshape(w.shape))
            off += w.size
            bs.append(vec[off: off + b.size].copy())
            off += b.size
        return MlpParams(tuple(ws), tuple(bs), self.activation)

    def scaled(self, factor: float) -> "MlpParams":
        return MlpParams(tuple(w * factor for w in self.layer_weights),
                         tuple(b * factor for b in self.layer_biases), self.activation)

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "sizes": [int(s) for s in self.sizes],
            "weights": [w.tolist() for w in self.layer_weights],
            "biases": [b.tolist() for b in self.layer_biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpParams":
        params = cls(tuple(np.array(w, dtype=float) for w in data["weights"]),
                     tuple(np.array(b, dtype=float) for b in data["biases"]), data["activation"])
        if "sizes" in data and list(params.sizes) != list(data["sizes"]):
            raise ValidationError("layer sizes do not match stored weights")
        return params


def init_mlp(input_dim: int, output_dim: int, hidden: Sequence[int] = (64, 64), activation: str = "relu",
             seed: int = 0, output_scale: float = 1.0) -> MlpParams:
    """He-initialised weights (Xavier for tanh), zero biases."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, output_dim]
    ws, bs = [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
        if i == len(dims) - 2:
            scale *= output_scale
        ws.append(rng.normal(0.0, scale, size=(dims[i + 1], dims[i])))
        bs.append(np.zeros(dims[i + 1]))
    return MlpParams(tuple(ws), tuple(bs), activation)


def linear_mlp(matrix) -> MlpParams:
    """Single affine layer z -> matrix @ z."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    return MlpParams((matrix,), (np.zeros(matrix.shape[0]),), "relu")


def _sigma(s, activation):
    if activation == "tanh":
        t = np.tanh(s)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    pos = s > 0.0
    return np.where(pos, s, 0.0), pos.astype(float), np.zeros_like(s)


def mlp_forward(params: MlpParams, z) -> np.ndarray:
    """Affine-then-activation layers, final layer affine. Accepts (n_z,) or (B, n_z)."""
    z = np.asarray(z, dtype=float)
    a = np.atleast_2d(z)
    last = len(params.layer_weights) - 1
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        s = a @ w.T + b
        a = s if i == last else _sigma(s, params.activation)[0]
    return a[0] if z.ndim == 1 else a


def mlp_input_jacobian(params: MlpParams, z) -> np.ndarray:
    """d psi / d z, shape (gamma, n_z) or (B, gamma, n_z)."""
    z = np.asarray(z, dtype=float)
    zz = np.atleast_2d(z)
    nb, nin = zz.shape
    a = zz
    da = np.broadcast_to(np.eye(nin), (nb, nin, nin)).copy()  # (B, width, n_in)
    last = len(params.layer_weights) - 1
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        s = a @ w.T + b
        ds = np.einsum("ij,bjk->bik", w, da)
        if i == last:
            a, da = s, ds
        else:
            h, h1, _ = _sigma(s, params.activation)
            a, da = h, h1[:, :, None] * ds
    return da[0] if z.ndim == 1 else da


def forward_tangent(params: MlpParams, z, direction):
    """Values psi(z) and directional derivatives (d psi/dz) direction, with a cache for backprop."""
    a = np.atleast_2d(np.asarray(z, dtype=float))
    t = np.atleast_2d(np.asarray(direction, dtype=float))
    cache = []
    last = len(params.layer_weights) - 1
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        s = a @ w.T + b
        ts = t @ w.T
        if i == last:
            cache.append((a, t, None, None, None))
            a, t = s, ts
        else:
            h, h1, h2 = _sigma(s, params.activation)
            cache.append((a, t, h1, h2, ts))
            a, t = h, h1 * ts
    return a, t, cache


def backward_tangent(params: MlpParams, cache, g_out, g_tan) -> MlpParams:
    """Gradient over parameters of sum(g_out * psi) + sum(g_tan * dpsi), direction held fixed.

    Returned as an :class:`MlpParams` holding the gradient arrays.
    """
    g_out = np.atleast_2d(g_out)
    g_tan = np.atleast_2d(g_tan)
    ws = params.layer_weights
    grad_w = [None] * len(ws)
    grad_b = [None] * len(ws)
    gs, gts = g_out, g_tan
    for i in range(len(ws) - 1, -1, -1):
        a_in, t_in, _, _, _ = cache[i]
        grad_w[i] = gs.T @ a_in + gts.T @ t_in
        grad_b[i] = gs.sum(axis=0)
        if i == 0:
            break
        ga = gs @ ws[i]
        gta = gts @ ws[i]
        _, _, h1, h2, ts = cache[i - 1]
        gs = ga * h1 + gta * h2 * ts
        gts = gta * h1
    return MlpParams(tuple(grad_w), tuple(grad_b), params.activation)


class NetworkPsi:
    """psi(z) backed by an :class:`MlpParams` (a linear psi is a one-layer network)."""

    def __init__(self, params: MlpParams):
        self.params = params
        self._arrays = params.kernel_arrays()

    @property
    def gamma(self) -> int:
        return self.params.output_dim

    @property
    def nz(self) -> int:
        return self.params.input_dim

    def kernel_arrays(self):
        return self._arrays

    def eval_all(self, z):
        """(value, jacobian, hessian of component 0)."""
        w, b, sizes, act = self._arrays
        return kernels.mlp_eval(w, b, sizes, act, np.atleast_1d(np.asarray(z, dtype=float)))

    def value(self, z) -> np.ndarray:
        return self.eval_all(z)[0]

    def jacobian(self, z) -> np.ndarray:
        return self.eval_all(z)[1]

    def grad1(self, z) -> np.ndarray:
        return self.eval_all(z)[1][0]

    def hessian1(self, z) -> np.ndarray:
        return self.eval_all(z)[2]

    def __call__(self, z) -> np.ndarray:
        return self.value(z)


class CallablePsi:
    """psi from an arbitrary callable; derivatives by central differences."""

    def __init__(self, fn, gamma: int, nz: int, step: float = 1e-5):
        self.fn = fn
        self._gamma = gamma
        self._nz = nz
        self.step = step

    @property
    def gamma(self) -> int:
        return self._gamma

    @property
    def nz(self) -> int:
        return self._nz

    def kernel_arrays(self):
        return None

    def value(self, z) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.fn(np.asarray(z, dtype=float)), dtype=float))

    def jacobian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        jac = np.empty((self._gamma, self._nz))
        for j in range(self._nz):
            e = np.zeros(self._nz)
            e[j] = self.step
            jac[:, j] = (self.value(z + e) - self.value(z - e)) / (2 * self.step)
        return jac

    def grad1(self, z) -> np.ndarray:
        return self.jacobian(z)[0]

    def hessian1(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        hess = np.empty((self._nz, self._nz))
        for j in range(self._nz):
            e = np.zeros(self._nz)
            e[j] = self.step
            hess[:, j] = (self.jacobian(z + e)[0] - self.jacobian(z - e)[0]) / (2 * self.step)
        return 0.5 * (hess + hess.T)

    def eval_all(self, z):
        return self.value(z), self.jacobian(z), self.hessian1(z)

    def __call__(self, z) -> np.ndarray:
        return self.value(z)


def zero_psi(gamma: int, nz: int) -> NetworkPsi:
    return NetworkPsi(linear_mlp(np.zeros((gamma, nz))))
