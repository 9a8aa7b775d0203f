"""Dense tensor helpers.

Tensors are plain numpy arrays. Stored payloads (weights on disk, fp
reference weights) are float32; all arithmetic runs in float64 so that
accumulation is wider than storage and results do not depend on the
storage dtype of the operands.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

COMPUTE_DTYPE = np.float64
STORAGE_DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=COMPUTE_DTYPE)


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` for 2-D operands with a float64 accumulator."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def gelu(x) -> np.ndarray:
    # tanh approximation
    x = as_tensor(x)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))
