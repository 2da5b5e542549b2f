"""Dense math primitives with hand-written backward passes.

There is no autograd tape: every differentiable operation here is a pure
forward function paired with an explicit vector-Jacobian product, so each
backward pass can be checked against central differences in isolation
(`grad_check`).

Arrays are plain row-major numpy ndarrays. Normal runs use float32;
gradient checks and oracle comparisons run everything in float64.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

LAYER_NORM_EPS = 1e-5


class InputError(ValueError):
    """An operation rejected its input (shape, range, or finiteness)."""


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise InputError(msg)


def make_rng(*entropy: int) -> np.random.Generator:
    """Deterministic generator keyed by a sequence of integers."""
    return np.random.default_rng(list(entropy))


# ---------------------------------------------------------------------------
# linear layer

@dataclass
class LinearLayer:
    """Affine map y = x @ weight.T + bias; weight is stored [out, in]."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def xavier_linear(rng: np.random.Generator, in_dim: int, out_dim: int,
                  dtype=np.float32) -> LinearLayer:
    """Fan-based uniform init; biases start at zero."""
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
    return LinearLayer(weight, np.zeros(out_dim, dtype=dtype))


def zeros_linear(in_dim: int, out_dim: int, dtype=np.float32) -> LinearLayer:
    return LinearLayer(np.zeros((out_dim, in_dim), dtype=dtype),
                       np.zeros(out_dim, dtype=dtype))


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    require(x.shape[-1] == layer.in_dim,
            f"linear_forward: input has {x.shape[-1]} channels, layer expects {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray,
                    d_out: np.ndarray) -> tuple[np.ndarray, LinearLayer]:
    """VJP of linear_forward; returns (d_x, gradients in LinearLayer form)."""
    d_x = d_out @ layer.weight
    x2 = x.reshape(-1, x.shape[-1])
    g2 = d_out.reshape(-1, d_out.shape[-1])
    return d_x, LinearLayer(g2.T @ x2, g2.sum(axis=0))


# ---------------------------------------------------------------------------
# pointwise / normalization ops

def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """VJP of softmax given its forward output y."""
    return (d_out - (d_out * y).sum(axis=-1, keepdims=True)) * y


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Zero mean / unit variance over the last axis, then affine."""
    return layer_norm_fwd(x, gain, shift)[0]


def layer_norm_fwd(x, gain, shift):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mean) * inv
    return xhat * gain + shift, (xhat, inv)


def layer_norm_backward(cache, gain, d_out):
    """Returns (d_x, d_gain, d_shift)."""
    xhat, inv = cache
    lead = tuple(range(d_out.ndim - 1))
    d_gain = (d_out * xhat).sum(axis=lead)
    d_shift = d_out.sum(axis=lead)
    d_xhat = d_out * gain
    d_x = inv * (d_xhat
                 - d_xhat.mean(axis=-1, keepdims=True)
                 - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True))
    return d_x, d_gain, d_shift


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(y: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * y * (1.0 - y)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]],
               theta: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central differences.

    `f` maps the parameter array to (scalar value, gradient w.r.t. theta).
    theta is perturbed in place one coordinate at a time and restored; the
    error at coordinate i is |analytic_i - fd_i| / max(1, |fd_i|). Run in
    float64 for meaningful results.
    """
    require(theta.flags["C_CONTIGUOUS"], "grad_check: theta must be contiguous")
    _, grad = f(theta)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    require(grad.size == theta.size, "grad_check: gradient shape mismatch")
    flat = theta.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta)[0])
        flat[i] = orig - h
        fm = float(f(theta)[0])
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise InputError(f"grad_check: non-finite value while probing parameter {i}")
        fd = (fp - fm) / (2.0 * h)
        err = abs(float(grad[i]) - fd) / max(1.0, abs(fd))
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# parameter trees
#
# Model parameters live in nested dataclasses / lists of ndarrays. These
# walkers give the optimizer, the checkpoint writer and the gradient checker
# one flat, deterministically ordered view of them.

def tree_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield (dotted name, array) for every ndarray in a dataclass/list tree."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from tree_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from tree_arrays(child, name)


def tree_map(fn, obj):
    """Apply fn to every ndarray, rebuilding the same container structure."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {f.name: tree_map(fn, getattr(obj, f.name))
                  for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [tree_map(fn, v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, v) for v in obj)
    return obj


def tree_zeros_like(obj):
    return tree_map(np.zeros_like, obj)


def astype_tree(obj, dtype):
    return tree_map(lambda a: a.astype(dtype), obj)


def tree_add_(dst, src) -> None:
    """In-place dst += src over two trees with identical structure."""
    for (an, a), (bn, b) in zip(tree_arrays(dst), tree_arrays(src), strict=True):
        require(an == bn and a.shape == b.shape,
                f"tree_add_: structure mismatch at {an!r} vs {bn!r}")
        a += b
