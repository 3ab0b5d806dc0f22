"""Offline folding of balancing factors into adjacent operators.

Balancing must cost nothing at inference. Weight-side factors fold into the
linear layer's weight rows. Activation-side factors fold either into the
scale/shift regression ahead of the conditioned layer norm (layers fed by
it) or into the per-channel dequantization steps of a preceding matrix
multiplication. Each fold has an equivalence verifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GranularityMismatchError, ShapeMismatchError
from .ops import layer_norm
from .quant import Granularity, QuantParams
from .salience import BalancingPair
from .validation import as_matrix, as_vector


@dataclass(frozen=True)
class AdaLNParams:
    """Linear maps regressing per-channel scale and shift from a conditioning vector."""

    w_gamma: np.ndarray  # (d_cond, d_in)
    w_beta: np.ndarray  # (d_cond, d_in)
    b_gamma: np.ndarray  # (d_in,)
    b_beta: np.ndarray  # (d_in,)

    def __post_init__(self):
        wg = as_matrix(self.w_gamma, "w_gamma")
        wb = as_matrix(self.w_beta, "w_beta")
        bg = as_vector(self.b_gamma, "b_gamma")
        bb = as_vector(self.b_beta, "b_beta")
        d_in = wg.shape[1]
        if wb.shape[1] != d_in or bg.size != d_in or bb.size != d_in:
            raise ShapeMismatchError(
                "scale/shift maps must agree on the output channel count"
            )
        if wb.shape[0] != wg.shape[0]:
            raise ShapeMismatchError(
                "scale and shift maps must share the conditioning dimension"
            )
        object.__setattr__(self, "w_gamma", wg)
        object.__setattr__(self, "w_beta", wb)
        object.__setattr__(self, "b_gamma", bg)
        object.__setattr__(self, "b_beta", bb)

    @property
    def d_in(self) -> int:
        return self.w_gamma.shape[1]

    @property
    def d_cond(self) -> int:
        return self.w_gamma.shape[0]

    def regress(self, c):
        """(gamma, beta) for one conditioning vector."""
        c = as_vector(c, "c")
        if c.size != self.d_cond:
            raise ShapeMismatchError(
                f"conditioning vector has length {c.size}, expected {self.d_cond}"
            )
        return c @ self.w_gamma + self.b_gamma, c @ self.w_beta + self.b_beta


def adaln_forward(z, params: AdaLNParams, c):
    """Conditioned layer norm: ``LN(z) * (1 + gamma) + beta``."""
    gamma, beta = params.regress(c)
    return layer_norm(z) * (1.0 + gamma) + beta


@dataclass(frozen=True)
class FoldedLinear:
    """A weight matrix with the weight-side balancing folded into its rows."""

    w_tilde: np.ndarray
    bias: np.ndarray | None
    pair: BalancingPair


def fold_weight(w, pair: BalancingPair, bias=None) -> FoldedLinear:
    """Scale row ``j`` of the weight by ``bw[j]``; the bias acts on output
    channels and is left untouched."""
    w = as_matrix(w, "w")
    if w.shape[0] != pair.d_in:
        raise ShapeMismatchError(
            f"weight has {w.shape[0]} rows, balancing expects {pair.d_in}"
        )
    w64 = w.astype(np.float64) * pair.bw[:, np.newaxis]
    return FoldedLinear(
        w_tilde=w64.astype(w.dtype, copy=False),
        bias=None if bias is None else np.asarray(bias),
        pair=pair,
    )


def fold_adaln(params: AdaLNParams, pair: BalancingPair) -> AdaLNParams:
    """Absorb the activation-side factors into the scale/shift regression.

    Column-scales both weight maps and both biases by ``bx`` so the regressed
    (gamma, beta) come out pre-scaled for any conditioning input.
    """
    if params.d_in != pair.d_in:
        raise ShapeMismatchError(
            f"regression outputs {params.d_in} channels, balancing expects {pair.d_in}"
        )
    bx = pair.bx

    def _cols(m):
        return (m.astype(np.float64) * bx).astype(m.dtype, copy=False)

    def _vec(v):
        return (v.astype(np.float64) * bx).astype(v.dtype, copy=False)

    return AdaLNParams(
        w_gamma=_cols(params.w_gamma),
        w_beta=_cols(params.w_beta),
        b_gamma=_vec(params.b_gamma),
        b_beta=_vec(params.b_beta),
    )


def balanced_adaln_forward(z, folded: AdaLNParams, pair: BalancingPair, c):
    """Conditioned layer norm emitting pre-balanced activations.

    ``LN(z) * (bx + gamma_f) + beta_f`` where (gamma_f, beta_f) come from the
    folded regression; equals ``adaln_forward(z, original, c) * bx``.
    """
    z = as_matrix(z, "z")
    if z.shape[1] != pair.d_in:
        raise ShapeMismatchError(
            f"input has {z.shape[1]} channels, balancing expects {pair.d_in}"
        )
    gamma_f, beta_f = folded.regress(c)
    bx = pair.bx.astype(z.dtype, copy=False)
    return layer_norm(z) * (bx + gamma_f) + beta_f


def fold_dequant_scales(params: QuantParams, pair: BalancingPair) -> QuantParams:
    """Absorb activation-side factors into a preceding per-channel dequantization.

    Only per-output-channel parameters can carry per-channel factors; the
    upstream operator's output channels are this layer's input channels.
    """
    if params.granularity is not Granularity.PER_OUTPUT_CHANNEL:
        raise GranularityMismatchError(
            "per-tensor dequantization cannot absorb per-channel balancing factors"
        )
    if params.num_groups != pair.d_in:
        raise ShapeMismatchError(
            f"parameters have {params.num_groups} groups, balancing expects {pair.d_in}"
        )
    return QuantParams(
        bits=params.bits,
        delta=params.delta * pair.bx,
        zero_point=params.zero_point.copy(),
        granularity=params.granularity,
    )


@dataclass(frozen=True)
class EquivalenceReport:
    """Outcome of comparing two forwards over a shared input set."""

    passed: bool
    tol: float
    max_relative_deviation: float
    worst_input: int
    deviations: tuple


def verify_equivalence(original_forward, folded_forward, inputs, tol: float) -> EquivalenceReport:
    """Max relative output deviation between two callables over ``inputs``.

    A failing comparison is a reported result, not an exception.
    """
    devs = []
    for x in inputs:
        a = np.asarray(original_forward(x), dtype=np.float64)
        b = np.asarray(folded_forward(x), dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatchError(
                f"forwards disagree on output shape: {a.shape} vs {b.shape}"
            )
        scale = np.linalg.norm(a)
        devs.append(float(np.linalg.norm(a - b) / max(scale, 1e-300)))
    if not devs:
        raise ShapeMismatchError("need at least one input to compare")
    worst = int(np.argmax(devs))
    return EquivalenceReport(
        passed=devs[worst] <= tol,
        tol=float(tol),
        max_relative_deviation=devs[worst],
        worst_input=worst,
        deviations=tuple(devs),
    )
