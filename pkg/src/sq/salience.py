"""Channel salience measurement and geometric-mean balancing.

Salience of a channel is the maximal absolute value among its elements.
Balancing rescales activation columns and weight rows by mutually inverse
per-channel factors so both sides meet at the geometric mean of their
saliences, shrinking the collectively quantized range on each side.

All statistics and balancing factors are computed in double precision;
callers cast to model precision only when folding factors into weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, EmptyVectorError, ShapeMismatchError
from .validation import as_matrix, as_vector, check_same_length

# Floor applied to saliences before division; a dead channel's balancing
# factor is irrelevant to the product, this merely keeps it finite.
SALIENCE_EPS = 1e-5

# bx * bw must reproduce 1 to within this relative tolerance.
INVERSE_TOL = 1e-12


def activation_salience(batch) -> np.ndarray:
    """Per-channel max |value| pooled over every sample and token in ``batch``.

    ``batch`` is a sequence of (tokens x channels) matrices sharing the
    channel count.
    """
    mats = [as_matrix(m, f"batch[{i}]") for i, m in enumerate(batch)]
    if not mats:
        raise EmptyBatchError("activation batch is empty")
    d_in = mats[0].shape[1]
    out = np.zeros(d_in, dtype=np.float64)
    for i, m in enumerate(mats):
        if m.shape[1] != d_in:
            raise ShapeMismatchError(
                f"batch[{i}] has {m.shape[1]} channels, expected {d_in}"
            )
        if m.shape[0] == 0:
            raise EmptyBatchError(f"batch[{i}] has no rows")
        np.maximum(out, np.abs(m).max(axis=0), out=out)
    return out


def weight_salience(w) -> np.ndarray:
    """Per input channel (row of a ``d_in x d_out`` weight) max |value|."""
    w = as_matrix(w, "w")
    return np.abs(w).max(axis=1).astype(np.float64)


def balanced_salience(sx, sw) -> np.ndarray:
    """Geometric mean of paired activation and weight channel saliences."""
    sx = as_vector(sx, "sx")
    sw = as_vector(sw, "sw")
    check_same_length(sx, sw, "salience vectors")
    return np.sqrt(sx * sw)


@dataclass(frozen=True)
class BalancingPair:
    """Mutually inverse diagonal scalings for activations (bx) and weights (bw)."""

    bx: np.ndarray
    bw: np.ndarray

    def __post_init__(self):
        bx = as_vector(self.bx, "bx")
        bw = as_vector(self.bw, "bw")
        check_same_length(bx, bw, "balancing factors")
        for name, v in (("bx", bx), ("bw", bw)):
            if not np.isfinite(v).all() or np.any(v <= 0.0):
                raise ShapeMismatchError(f"{name} entries must be positive and finite")
        if np.max(np.abs(bx * bw - 1.0)) > INVERSE_TOL:
            raise ShapeMismatchError(
                "bx and bw are not mutual inverses within tolerance"
            )
        object.__setattr__(self, "bx", bx)
        object.__setattr__(self, "bw", bw)

    @property
    def d_in(self) -> int:
        return self.bx.size

    def swapped(self) -> "BalancingPair":
        """The inverse transformation (useful for undo tests)."""
        return BalancingPair(bx=self.bw, bw=self.bx)

    @classmethod
    def identity(cls, d_in: int) -> "BalancingPair":
        ones = np.ones(d_in, dtype=np.float64)
        return cls(bx=ones, bw=ones.copy())


def build_balancing(sx, sw, eps: float = SALIENCE_EPS) -> BalancingPair:
    """Construct the balancing factors from paired channel saliences.

    With ``s = sqrt(sx * sw)`` the factors are ``bx = s / sx`` and
    ``bw = s / sw`` (saliences floored at ``eps``), so ``bx * bw == 1`` by
    construction and rescaled channels meet at the geometric mean.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    sx = np.maximum(as_vector(sx, "sx"), eps)
    sw = np.maximum(as_vector(sw, "sw"), eps)
    check_same_length(sx, sw, "salience vectors")
    s_bal = np.sqrt(sx * sw)
    return BalancingPair(bx=s_bal / sx, bw=s_bal / sw)


def apply_balancing(x, w, pair: BalancingPair):
    """Scale activation columns by bx and weight rows by bw.

    The matrix product is preserved because the factors cancel:
    ``(x @ diag(bx)) @ (diag(bw) @ w) == x @ w`` up to roundoff.
    """
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    if x.shape[1] != pair.d_in or w.shape[0] != pair.d_in:
        raise ShapeMismatchError(
            f"x has {x.shape[1]} columns and w has {w.shape[0]} rows; both must "
            f"equal the balancing length {pair.d_in}"
        )
    x_b = x * pair.bx.astype(x.dtype)
    w_b = w * pair.bw.astype(w.dtype)[:, np.newaxis]
    return x_b, w_b


def overall_salience(s) -> float:
    """Maximum salience across channels (range of a collectively quantized tensor)."""
    s = as_vector(s, "s", allow_empty=True)
    if s.size == 0:
        raise EmptyVectorError("salience vector is empty")
    return float(np.max(s))
