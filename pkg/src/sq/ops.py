"""Small numerical building blocks shared by the block model and folding."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

# Variance guard inside layer normalization.
LN_EPS = 1e-6


def layer_norm(z: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Per-token normalization to zero mean and unit variance over channels.

    Carries no learned affine; scale and shift are applied by the caller.
    A constant row normalizes to zeros.
    """
    mean = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    return (z - mean) / np.sqrt(var + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
