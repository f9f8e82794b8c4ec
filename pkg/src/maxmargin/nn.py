"""Dense ReLU networks with exact backpropagation.

Tensors are 64-bit float numpy arrays in row-major order. A model is an
ordered list of affine layers (W: out x in, b: out) with ReLU on every
hidden layer and identity on the output layer. forward/backward are pure
given a model snapshot; optimizer_step mutates the model in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

Layer = tuple[np.ndarray, np.ndarray]
ParamGrads = list[tuple[np.ndarray, np.ndarray]]

CHECKPOINT_MAGIC = b"MLPC"
CHECKPOINT_VERSION = 1


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


@dataclass
class DenseModel:
    """Parameters of a fully-connected ReLU classifier with K output logits."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("model needs at least one layer")
        layers = []
        for i, (w, b) in enumerate(self.layers):
            w = np.ascontiguousarray(w, dtype=np.float64)
            b = np.ascontiguousarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {i}: W must be (out, in) with b of length out")
            if layers and layers[-1][0].shape[0] != w.shape[1]:
                raise DimensionError(
                    f"layer {i}: input dim {w.shape[1]} does not chain with "
                    f"previous output dim {layers[-1][0].shape[0]}"
                )
            layers.append((w, b))
        if layers[-1][0].shape[0] < 2:
            raise DimensionError("output layer must have K >= 2 logits")
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "DenseModel":
        return DenseModel([(w.copy(), b.copy()) for w, b in self.layers])

    def equals(self, other: "DenseModel") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0
        for w, b in self.layers:
            w[...] = flat[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = flat[pos : pos + b.size]
            pos += b.size
        if pos != flat.size:
            raise DimensionError("flat parameter vector has wrong length")


def init_model(sizes: Sequence[int], seed: int) -> DenseModel:
    """Model with layer widths ``sizes`` (input, hidden..., output).

    Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero; keeps the
    initial logits O(1).
    """
    if len(sizes) < 2:
        raise DimensionError("need at least input and output sizes")
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return DenseModel(layers)


def _as_batch(model: DenseModel, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(
            f"input of dim {x.shape[-1] if x.ndim else 0} does not match model input dim "
            f"{model.input_dim}"
        )
    return x, single


def _forward_trace(model: DenseModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus post-activation values of every layer input (a_0 .. a_{L-1})."""
    acts = [x]
    a = x
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        z = a @ w.T + b
        a = z if i == last else np.maximum(z, 0.0)
        if i != last:
            acts.append(a)
    return a, acts


def forward(model: DenseModel, x) -> np.ndarray:
    """Logits for a single example (K,) or a batch (n, K). Deterministic."""
    xb, single = _as_batch(model, x)
    logits, _ = _forward_trace(model, xb)
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward produced non-finite logits")
    return logits[0] if single else logits


def backward(model: DenseModel, x, upstream) -> tuple[ParamGrads, np.ndarray]:
    """Gradients of <upstream, logits> w.r.t. every parameter and w.r.t. x.

    For a batch the inner product sums over all examples. ReLU subgradient
    at exactly 0 is 0.
    """
    xb, single = _as_batch(model, x)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None, :]
    if up.shape != (xb.shape[0], model.num_classes):
        raise DimensionError("upstream shape must match logits shape")
    _, acts = _forward_trace(model, xb)
    param_grads: ParamGrads = [None] * len(model.layers)  # type: ignore[list-item]
    g = up
    for i in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[i]
        a_in = acts[i]
        param_grads[i] = (g.T @ a_in, g.sum(axis=0))
        g = g @ w
        if i > 0:
            g = g * (acts[i] > 0.0)  # acts[i] is relu(z_i); zero pattern matches z_i > 0
    input_grad = g[0] if single else g
    return param_grads, input_grad


def input_gradient(model: DenseModel, x, upstream) -> np.ndarray:
    """Gradient of <upstream, logits> w.r.t. x only (fast path for attacks)."""
    xb, single = _as_batch(model, x)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None, :]
    _, acts = _forward_trace(model, xb)
    g = up
    for i in range(len(model.layers) - 1, -1, -1):
        g = g @ model.layers[i][0]
        if i > 0:
            g = g * (acts[i] > 0.0)
    return g[0] if single else g


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)  # private copy; coordinates are nudged in place
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function returned non-finite value during differencing")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class OptimizerState:
    """SGD-with-momentum or Adam state; buffers mirror the model parameters."""

    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    buffers: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: DenseModel, kind: str, lr: float, **kw) -> "OptimizerState":
        state = cls(kind=kind, lr=lr, **kw)
        if kind == "sgd":
            state.buffers = [
                (np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers
            ]
        elif kind == "adam":
            state.buffers = [
                (np.zeros_like(w), np.zeros_like(b), np.zeros_like(w), np.zeros_like(b))
                for w, b in model.layers
            ]
        else:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        return state


def optimizer_step(state: OptimizerState, model: DenseModel, param_grads: ParamGrads) -> None:
    """Apply one update in place and advance the state by one step."""
    if len(param_grads) != len(model.layers):
        raise DimensionError("gradient list does not match model layers")
    for (gw, gb), (w, b) in zip(param_grads, model.layers):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise DimensionError("gradient shapes must mirror parameter shapes")
    state.step_count += 1
    if state.kind == "sgd":
        for (vw, vb), (gw, gb), (w, b) in zip(state.buffers, param_grads, model.layers):
            vw *= state.momentum
            vw += gw
            vb *= state.momentum
            vb += gb
            w -= state.lr * vw
            b -= state.lr * vb
    elif state.kind == "adam":
        t = state.step_count
        c1 = 1.0 - state.beta1**t
        c2 = 1.0 - state.beta2**t
        for (mw, mb, vw, vb), (gw, gb), (w, b) in zip(
            state.buffers, param_grads, model.layers
        ):
            mw *= state.beta1
            mw += (1 - state.beta1) * gw
            mb *= state.beta1
            mb += (1 - state.beta1) * gb
            vw *= state.beta2
            vw += (1 - state.beta2) * gw * gw
            vb *= state.beta2
            vb += (1 - state.beta2) * gb * gb
            w -= state.lr * (mw / c1) / (np.sqrt(vw / c2) + state.eps_hat)
            b -= state.lr * (mb / c1) / (np.sqrt(vb / c2) + state.eps_hat)
    else:
        raise ValueError(f"unknown optimizer kind {state.kind!r}")


def save_model(model: DenseModel, path) -> None:
    """Self-describing little-endian checkpoint; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(model.layers)))
        for w, b in model.layers:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in model.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> DenseModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint (magic {magic!r})")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes = [struct.unpack("<II", fh.read(8)) for _ in range(n_layers)]
        layers = []
        for out_dim, in_dim in shapes:
            w = np.frombuffer(fh.read(8 * out_dim * in_dim), dtype="<f8").reshape(
                out_dim, in_dim
            )
            b = np.frombuffer(fh.read(8 * out_dim), dtype="<f8")
            layers.append((w.astype(np.float64), b.astype(np.float64)))
        return DenseModel(layers)
