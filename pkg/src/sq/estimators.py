"""Scikit-learn style wrappers around the quantization and balancing core.

Both estimators follow the fit/transform contract, expose ``get_params`` /
``set_params`` through ``BaseEstimator`` and compose with sklearn pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeMismatchError
from .quant import (
    DEFAULT_SHRINK_GRID,
    Granularity,
    fake_quantize,
    fit_minmax,
    fit_mse_search,
    quant_error_mse,
    quantize,
)
from .salience import SALIENCE_EPS, build_balancing, weight_salience
from .temporal import TimestepActivations, calibrate_layer
from .validation import as_matrix


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Fake-quantization transformer with min-max or MSE-searched ranges.

    Parameters
    ----------
    bits : int, default=8
        Width of the integer code range ``[0, 2**bits - 1]``.
    granularity : {"per_tensor", "per_output_channel"}, default="per_tensor"
        One shared range, or one range per column.
    fitter : {"minmax", "mse_search"}, default="minmax"
        Plain min-max ranges, or a clipping-range search minimizing the mean
        squared reconstruction error.
    shrink_grid : sequence of float in (0, 1], optional
        Candidate range-shrink factors for the MSE search.
    """

    def __init__(self, bits=8, granularity="per_tensor", fitter="minmax", shrink_grid=None):
        self.bits = bits
        self.granularity = granularity
        self.fitter = fitter
        self.shrink_grid = shrink_grid

    def fit(self, X, y=None):
        X = np.asarray(X)
        granularity = Granularity(self.granularity)
        if self.fitter == "minmax":
            self.params_ = fit_minmax(X, self.bits, granularity)
        elif self.fitter == "mse_search":
            grid = DEFAULT_SHRINK_GRID if self.shrink_grid is None else self.shrink_grid
            self.params_ = fit_mse_search(X, self.bits, granularity, grid)
        else:
            raise ValueError(f"unknown fitter {self.fitter!r}")
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else None
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return fake_quantize(X, self.params_)

    def quantize(self, X):
        """Integer codes instead of the dequantized image."""
        check_is_fitted(self, "params_")
        return quantize(X, self.params_)

    def quantization_error(self, X) -> float:
        check_is_fitted(self, "params_")
        return quant_error_mse(X, self.params_)


class SalienceBalancer(TransformerMixin, BaseEstimator):
    """Equalizes per-channel magnitudes between activations and a weight matrix.

    ``fit`` measures channel saliences of the calibration activations and the
    weight, then derives mutually inverse column/row scalings that move both
    sides to the geometric mean of their saliences. ``transform`` applies the
    activation-side scaling; :meth:`transform_weight` applies the weight side.

    Parameters
    ----------
    eps : float, default=1e-5
        Salience floor applied before division (dead channels).
    temporal_weighting : bool, default=True
        With multi-timestep calibration data, weight each timestep's salience
        by a softmax over negated rank correlations against the weight
        salience. When False, only the midpoint timestep is used.
    """

    def __init__(self, eps=SALIENCE_EPS, temporal_weighting=True):
        self.eps = eps
        self.temporal_weighting = temporal_weighting

    @staticmethod
    def _coerce(X) -> TimestepActivations:
        """Accept a matrix, a batch of matrices, per-timestep batches, or
        an already-built :class:`TimestepActivations`."""
        if isinstance(X, TimestepActivations):
            return X
        if isinstance(X, np.ndarray):
            if X.ndim == 2:
                return TimestepActivations(per_t=[[X]], timesteps=[0])
            if X.ndim == 3:
                return TimestepActivations(per_t=[list(X)], timesteps=[0])
        elif isinstance(X, (list, tuple)) and len(X):
            if np.asarray(X[0]).ndim == 2:
                # one batch of sample matrices, single timestep
                return TimestepActivations(per_t=[list(X)], timesteps=[0])
            # sequence of per-timestep batches
            return TimestepActivations(per_t=X, timesteps=range(len(X)))
        raise ShapeMismatchError(
            "expected a matrix, a batch of matrices, or per-timestep batches"
        )

    def fit(self, X, y=None, *, weight=None):
        if weight is None:
            raise ValueError("SalienceBalancer.fit requires the layer weight matrix")
        weight = as_matrix(weight, "weight")
        acts = self._coerce(X)
        if self.temporal_weighting:
            cal = calibrate_layer(acts, weight, self.eps)
            pair = cal.pair
            self.rho_ = cal.weights.rho
            self.eta_ = cal.weights.eta
            self.temporal_salience_ = cal.temporal_salience
        else:
            sal_t = acts.salience_per_timestep()
            mid = sal_t[acts.num_timesteps // 2]
            pair = build_balancing(mid, weight_salience(weight), self.eps)
            self.rho_ = None
            self.eta_ = None
            self.temporal_salience_ = mid
        self.pair_ = pair
        self.bx_ = pair.bx
        self.bw_ = pair.bw
        self.weight_salience_ = weight_salience(weight)
        self.per_timestep_salience_ = acts.salience_per_timestep()
        self.n_features_in_ = acts.d_in
        return self

    def transform(self, X):
        check_is_fitted(self, "pair_")
        X = as_matrix(X, "X")
        if X.shape[1] != self.pair_.d_in:
            raise ShapeMismatchError(
                f"X has {X.shape[1]} channels, balancer was fitted on {self.pair_.d_in}"
            )
        return X * self.bx_.astype(X.dtype)

    def inverse_transform(self, X):
        check_is_fitted(self, "pair_")
        X = as_matrix(X, "X")
        return X * self.bw_.astype(X.dtype)

    def transform_weight(self, weight):
        """Row-scale a weight matrix by the weight-side factors."""
        check_is_fitted(self, "pair_")
        weight = as_matrix(weight, "weight")
        if weight.shape[0] != self.pair_.d_in:
            raise ShapeMismatchError(
                f"weight has {weight.shape[0]} rows, balancer was fitted on "
                f"{self.pair_.d_in}"
            )
        return weight * self.bw_.astype(weight.dtype)[:, np.newaxis]
