"""Uniform asymmetric quantization primitives.

Integer codes live on ``[0, 2**bits - 1]``; real values are reconstructed as
``delta * (code - zero_point)``. Zero points are stored as integers so the
reconstruction grid is an exact affine lattice. Weights are grouped per
output channel (one column of a ``d_in x d_out`` matrix per group), while
activations use a single per-tensor group. Fitting statistics are always
accumulated in double precision, whatever the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidParamsError, InvalidShapeError, ShapeMismatchError
from .validation import as_float_array, check_finite

# Step-size floor applied when a group has zero range (e.g. an all-zero
# column); keeps every division well defined.
DELTA_FLOOR = 1e-8

# Clipping-range candidates used by the MSE search when no grid is given.
DEFAULT_SHRINK_GRID = tuple(np.round(np.linspace(0.30, 1.0, 15), 3))


class Granularity(str, Enum):
    PER_TENSOR = "per_tensor"
    PER_OUTPUT_CHANNEL = "per_output_channel"


@dataclass(frozen=True)
class QuantParams:
    """Step sizes and zero points of a uniform asymmetric quantizer.

    ``delta`` and ``zero_point`` hold one entry per quantization group:
    a single entry for per-tensor granularity, one per output channel
    (column) otherwise.
    """

    bits: int
    delta: np.ndarray
    zero_point: np.ndarray
    granularity: Granularity = Granularity.PER_TENSOR

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or self.bits < 2:
            raise InvalidParamsError(f"bits must be an integer >= 2, got {self.bits!r}")
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        zero = np.atleast_1d(np.asarray(self.zero_point))
        if zero.dtype.kind == "f":
            if not np.all(zero == np.rint(zero)):
                raise InvalidParamsError("zero_point must hold integer values")
        zero = zero.astype(np.int64)
        if delta.ndim != 1 or zero.ndim != 1 or delta.shape != zero.shape:
            raise InvalidParamsError(
                f"delta and zero_point must be matching 1-D arrays, got shapes "
                f"{delta.shape} and {zero.shape}"
            )
        if not np.isfinite(delta).all() or np.any(delta <= 0.0):
            raise InvalidParamsError("every delta must be positive and finite")
        if np.any(zero < 0) or np.any(zero > self.qmax):
            raise InvalidParamsError(
                f"zero_point entries must lie in [0, {self.qmax}]"
            )
        if self.granularity is Granularity.PER_TENSOR and delta.size != 1:
            raise InvalidParamsError(
                f"per-tensor parameters must have exactly one group, got {delta.size}"
            )
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "zero_point", zero)

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def num_groups(self) -> int:
        return self.delta.size


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the parameters that produced them."""

    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.dtype.kind not in "iu":
            raise InvalidParamsError("codes must be integers")
        if codes.size and (codes.min() < 0 or codes.max() > self.params.qmax):
            raise InvalidParamsError(
                f"codes must lie in [0, {self.params.qmax}]"
            )
        object.__setattr__(self, "codes", codes)


def _broadcast_params(shape, params: QuantParams):
    """Return (delta, zero_point) broadcastable against an array of ``shape``."""
    if params.granularity is Granularity.PER_TENSOR:
        return params.delta[0], params.zero_point[0]
    if len(shape) != 2:
        raise ShapeMismatchError(
            "per-output-channel quantization expects a 2-D array, got shape "
            f"{tuple(shape)}"
        )
    if params.num_groups != shape[1]:
        raise ShapeMismatchError(
            f"parameters have {params.num_groups} groups but the array has "
            f"{shape[1]} output channels"
        )
    return params.delta[np.newaxis, :], params.zero_point[np.newaxis, :]


def quantize(x, params: QuantParams) -> QuantizedTensor:
    """Map real values to integer codes: round to nearest (ties to even),
    shift by the zero point and clamp into the code range."""
    x = as_float_array(x, "x")
    check_finite(x, "x")
    delta, zero = _broadcast_params(x.shape, params)
    codes = np.clip(np.rint(x / delta) + zero, 0, params.qmax)
    dtype = np.uint8 if params.bits <= 8 else np.int32
    return QuantizedTensor(codes.astype(dtype), params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct real values ``delta * (code - zero_point)`` in float64."""
    delta, zero = _broadcast_params(q.codes.shape, q.params)
    return delta * (q.codes.astype(np.float64) - zero)


def fake_quantize(x, params: QuantParams) -> np.ndarray:
    """Quantize then dequantize, returned in the dtype of ``x``.

    The result is a projection: applying it twice gives the identical array.
    """
    x = as_float_array(x, "x")
    out = dequantize(quantize(x, params))
    return out.astype(x.dtype, copy=False)


def _group_ranges(x: np.ndarray, granularity: Granularity):
    """Per-group (lo, hi) as float64 arrays, extended to include zero so the
    zero point always lands inside the code range."""
    if x.size == 0:
        raise InvalidShapeError("cannot fit quantization parameters on an empty array")
    if granularity is Granularity.PER_TENSOR:
        lo = np.atleast_1d(np.float64(x.min()))
        hi = np.atleast_1d(np.float64(x.max()))
    else:
        if x.ndim != 2:
            raise ShapeMismatchError(
                f"per-output-channel fitting expects a 2-D array, got shape {x.shape}"
            )
        lo = x.min(axis=0).astype(np.float64)
        hi = x.max(axis=0).astype(np.float64)
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def _params_from_range(lo, hi, bits: int, granularity: Granularity) -> QuantParams:
    qmax = (1 << bits) - 1
    delta = np.maximum((hi - lo) / qmax, DELTA_FLOOR)
    zero = np.clip(np.rint(-lo / delta), 0, qmax)
    return QuantParams(bits, delta, zero, granularity)


def fit_minmax(x, bits: int, granularity=Granularity.PER_TENSOR) -> QuantParams:
    """Fit step size and zero point from per-group min/max.

    ``delta = (max - min) / (2**bits - 1)`` with the range extended to
    include zero and floored at :data:`DELTA_FLOOR`; the zero point is
    ``round(-min / delta)`` which then always lies inside the code range.
    """
    if not isinstance(bits, (int, np.integer)) or bits < 2:
        raise InvalidParamsError(f"bits must be an integer >= 2, got {bits!r}")
    x = as_float_array(x, "x")
    check_finite(x, "x")
    granularity = Granularity(granularity)
    lo, hi = _group_ranges(x, granularity)
    return _params_from_range(lo, hi, bits, granularity)


def fit_mse_search(
    x,
    bits: int,
    granularity=Granularity.PER_TENSOR,
    shrink_grid=DEFAULT_SHRINK_GRID,
) -> QuantParams:
    """Min-max fit with a clipping-range search.

    Each candidate scales the (zero-extended) range by a shrink factor in
    ``(0, 1]``; the factor minimizing the mean squared reconstruction error
    wins, independently per group. Ties go to the larger factor, i.e. the
    wider range.
    """
    x = as_float_array(x, "x")
    check_finite(x, "x")
    granularity = Granularity(granularity)
    grid = [float(s) for s in shrink_grid]
    if not grid:
        raise InvalidParamsError("shrink_grid must be nonempty")
    if any(s <= 0.0 or s > 1.0 for s in grid):
        raise InvalidParamsError("shrink factors must lie in (0, 1]")

    lo, hi = _group_ranges(x, granularity)
    x64 = x.astype(np.float64, copy=False)
    if granularity is Granularity.PER_TENSOR:
        reduce_axes = tuple(range(x.ndim))
    else:
        reduce_axes = 0

    best_mse = None
    best_delta = None
    best_zero = None
    for s in sorted(grid):
        cand = _params_from_range(lo * s, hi * s, bits, granularity)
        err = x64 - dequantize(quantize(x64, cand))
        mse = np.mean(err * err, axis=reduce_axes)
        mse = np.atleast_1d(mse)
        if best_mse is None:
            best_mse = mse.copy()
            best_delta = cand.delta.copy()
            best_zero = cand.zero_point.copy()
        else:
            take = mse <= best_mse  # ascending grid: equal MSE keeps the larger factor
            best_mse[take] = mse[take]
            best_delta[take] = cand.delta[take]
            best_zero[take] = cand.zero_point[take]
    return QuantParams(bits, best_delta, best_zero, granularity)


def quant_error_mse(x, params: QuantParams) -> float:
    """Mean squared error between ``x`` and its fake-quantized image."""
    x = as_float_array(x, "x")
    fq = fake_quantize(x, params)
    err = x.astype(np.float64) - fq.astype(np.float64)
    return float(np.mean(err * err))
