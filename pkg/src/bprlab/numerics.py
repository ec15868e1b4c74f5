"""Small deterministic MLP kernel: forward/backward, Adam, l2 normalization,
and a cyclic-Jacobi symmetric eigensolver.

Everything is float64 and single-threaded. Shapes follow the numpy row
convention: a batch is (n, dim), a weight is (out_dim, in_dim).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, RejectedInputError, TrainingDivergenceError

ACTIVATIONS = ("relu", "tanh", "identity")
_ACT_TAG = {"relu": 0, "tanh": 1, "identity": 2}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}

CHECKPOINT_MAGIC = b"BPRCKPT1"


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise RejectedInputError("layer weight/bias shapes inconsistent")
        if self.activation not in ACTIVATIONS:
            raise RejectedInputError(f"unknown activation {self.activation!r}")


class MlpModel:
    """Plain fully-connected net with a fixed per-layer activation."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise RejectedInputError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise RejectedInputError("consecutive layer dimensions do not chain")
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise RejectedInputError("parameter list length mismatch")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise RejectedInputError("parameter shape mismatch")
            layer.weight = np.asarray(w, dtype=np.float64)
            layer.bias = np.asarray(b, dtype=np.float64)

    def copy(self) -> "MlpModel":
        return MlpModel(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        params, i = [], 0
        for p in self.parameters():
            params.append(flat[i : i + p.size].reshape(p.shape))
            i += p.size
        if i != flat.size:
            raise RejectedInputError("flat parameter vector length mismatch")
        self.set_parameters(params)


def init_mlp(dims: list[int], activations: list[str], rng: np.random.Generator) -> MlpModel:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if len(activations) != len(dims) - 1:
        raise RejectedInputError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpModel(layers)


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0.0).astype(np.float64)
    if act == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass
class ForwardCache:
    model_id: int
    single: bool
    inputs: list[np.ndarray] = field(default_factory=list)  # per-layer inputs (n, in)
    preacts: list[np.ndarray] = field(default_factory=list)  # per-layer pre-activations


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise RejectedInputError(
            f"input dim {x.shape[-1]} != model input dim {model.input_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("non-finite input")
    cache = ForwardCache(model_id=id(model), single=single)
    h = x
    for layer in model.layers:
        cache.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        cache.preacts.append(z)
        h = _apply_activation(z, layer.activation)
    return (h[0] if single else h), cache


def backward(
    model: MlpModel, cache: ForwardCache, output_gradient: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns (gradients in parameters() order, gradient w.r.t. the input)."""
    if cache.model_id != id(model) or len(cache.inputs) != len(model.layers):
        raise ContractViolationError("cache does not match this model/forward call")
    gy = np.asarray(output_gradient, dtype=np.float64)
    if cache.single:
        gy = gy[None, :]
    if gy.shape != (cache.inputs[0].shape[0], model.output_dim):
        raise ContractViolationError("output gradient shape mismatch")
    grads: list[np.ndarray] = [None] * (2 * len(model.layers))
    g = gy
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        gz = g * _activation_grad(cache.preacts[i], layer.activation)
        grads[2 * i] = gz.T @ cache.inputs[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weight
    return grads, (g[0] if cache.single else g)


def l2_normalize_with_grad(v: np.ndarray, eps_stability: float = 1e-8):
    """Row-wise v / max(||v||, eps). Returns (unit, backprop) where
    backprop maps a gradient w.r.t. the output to one w.r.t. v."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise RejectedInputError("non-finite input to l2 normalization")
    single = v.ndim == 1
    vv = v[None, :] if single else v
    norms = np.linalg.norm(vv, axis=1, keepdims=True)
    denom = np.maximum(norms, eps_stability)
    u = vv / denom
    floored = norms[:, 0] <= eps_stability

    def backprop(gu: np.ndarray) -> np.ndarray:
        g = gu[None, :] if single else np.asarray(gu, dtype=np.float64)
        # Jacobian (I - u u^T)/||v|| above the floor, I/eps below it.
        gv = (g - u * np.sum(u * g, axis=1, keepdims=True)) / denom
        if np.any(floored):
            gv[floored] = g[floored] / eps_stability
        return gv[0] if single else gv

    return (u[0] if single else u), backprop


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float = 3e-4, **kw):
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> list[np.ndarray]:
    """Bias-corrected Adam. Mutates state, returns new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise RejectedInputError("params/grads/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient at parameter index {i}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out.append(p - state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps_stability))
    return out


def symmetric_eigenvalues(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending."""
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise RejectedInputError("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise RejectedInputError("non-finite matrix entries")
    if np.max(np.abs(a - a.T)) > 1e-10:
        raise RejectedInputError("matrix is not symmetric within 1e-10")
    n = a.shape[0]
    if n == 1:
        return a[0, :1].copy()
    for _ in range(max_sweeps):
        off2 = np.sum(a * a) - np.sum(np.diag(a) ** 2)
        if off2 < tol * tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                with np.errstate(over="ignore"):  # inf theta -> identity rotation
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:  # theta**2 would overflow
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    vals = np.sort(np.diag(a))[::-1]
    return vals.copy()


def save_checkpoint(model: MlpModel, path: str) -> None:
    """Versioned binary: magic, layer count, per layer (rows, cols, act tag,
    weights row-major, bias), all little-endian."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def checkpoint_bytes(model: MlpModel) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        rows, cols = layer.weight.shape
        chunks.append(struct.pack("<IIB", rows, cols, _ACT_TAG[layer.activation]))
        chunks.append(layer.weight.astype("<f8").tobytes())
        chunks.append(layer.bias.astype("<f8").tobytes())
    return b"".join(chunks)


def load_checkpoint(path: str) -> MlpModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return model_from_bytes(data)


def model_from_bytes(data: bytes) -> MlpModel:
    if data[:8] != CHECKPOINT_MAGIC:
        raise RejectedInputError("bad checkpoint magic")
    (n_layers,) = struct.unpack_from("<I", data, 8)
    offset = 12
    layers = []
    for _ in range(n_layers):
        rows, cols, tag = struct.unpack_from("<IIB", data, offset)
        offset += 9
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += rows * cols * 8
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=offset)
        offset += rows * 8
        layers.append(Layer(w.copy(), b.copy(), _TAG_ACT[tag]))
    return MlpModel(layers)
