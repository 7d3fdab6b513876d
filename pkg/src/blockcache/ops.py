"""Dense kernels shared by the denoiser, profiler, and policy network.

Everything runs in float64 with a fixed reduction strategy; no function
mutates its arguments.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def layernorm(x: np.ndarray, gain=None, bias=None, eps: float = 1e-5) -> np.ndarray:
    """Row-wise layer normalization with optional affine.

    Rows are normalized to zero mean and unit variance before the affine;
    a constant row normalizes to zeros (its deviations are exactly zero,
    so eps never divides by zero).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layernorm expects a non-empty 2-D input, got shape {x.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    y = centered / np.sqrt(var + eps)
    if gain is not None:
        y = y * np.asarray(gain, dtype=np.float64)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D input, got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU activation, tanh form."""
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_K * (x + _GELU_C * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of :func:`gelu`."""
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
