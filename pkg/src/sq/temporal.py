"""Timestep-aware salience calibration driven by rank correlation.

Activation statistics drift across sampler timesteps while weights stay
fixed. Per-timestep salience vectors are aggregated into one profile by a
softmax over negated Spearman correlations against the weight salience, so
timesteps where activation and weight extremes avoid each other (and
balancing buys the most) receive the largest weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyBatchError,
    LengthMismatchError,
    ShapeMismatchError,
    TooShortError,
)
from .salience import (
    SALIENCE_EPS,
    BalancingPair,
    activation_salience,
    balanced_salience,
    build_balancing,
    weight_salience,
)
from .validation import as_matrix, as_vector


def average_ranks(v) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank span."""
    v = as_vector(v, "v")
    _, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    mean_rank = (starts + ends + 1) / 2.0
    return mean_rank[inverse]


def spearman_rho(a, b) -> float:
    """Spearman rank correlation with average ranks for ties.

    Defined as the Pearson correlation of the rank vectors; returns 0.0 when
    either input is constant (its ranking carries no information).
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.size != b.size:
        raise LengthMismatchError(
            f"vectors must have equal length, got {a.size} and {b.size}"
        )
    if a.size < 2:
        raise TooShortError("rank correlation needs at least two elements")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    va = float(ra @ ra)
    vb = float(rb @ rb)
    if va == 0.0 or vb == 0.0:
        return 0.0
    return float(np.clip((ra @ rb) / np.sqrt(va * vb), -1.0, 1.0))


@dataclass(frozen=True)
class SpearmanWeights:
    """Per-timestep aggregation weights ``eta`` and the correlations behind them."""

    eta: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        eta = as_vector(self.eta, "eta")
        rho = as_vector(self.rho, "rho")
        if eta.size != rho.size:
            raise LengthMismatchError("eta and rho must have equal length")
        if np.any(eta <= 0.0):
            raise ShapeMismatchError("every eta must be positive")
        if abs(eta.sum() - 1.0) > 1e-12:
            raise ShapeMismatchError("eta must sum to 1")
        if np.any(np.abs(rho) > 1.0 + 1e-12):
            raise ShapeMismatchError("rho entries must lie in [-1, 1]")
        # eta must be the softmax of -rho, which makes it (weakly, and for any
        # meaningful correlation gap strictly) decreasing in rho.
        z = -rho
        e = np.exp(z - z.max())
        if not np.allclose(eta, e / e.sum(), rtol=1e-9, atol=1e-15):
            raise ShapeMismatchError("eta must be the normalized exponential of -rho")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "rho", rho)

    @property
    def num_timesteps(self) -> int:
        return self.eta.size


@dataclass(frozen=True)
class TimestepActivations:
    """Ordered per-timestep activation batches for one layer input.

    ``per_t[t]`` is the list of (tokens x channels) matrices observed at the
    sampler timestep ``timesteps[t]``.
    """

    per_t: tuple
    timesteps: tuple

    def __post_init__(self):
        per_t = tuple(tuple(np.asarray(m) for m in batch) for batch in self.per_t)
        if not per_t:
            raise EmptyBatchError("need at least one timestep")
        ts = tuple(int(t) for t in self.timesteps)
        if len(ts) != len(per_t):
            raise LengthMismatchError(
                f"{len(per_t)} batches but {len(ts)} timestep indices"
            )
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ShapeMismatchError("timesteps must be strictly increasing")
        d_in = None
        for t, batch in enumerate(per_t):
            if not batch:
                raise EmptyBatchError(f"timestep {ts[t]} has an empty batch")
            for m in batch:
                if m.ndim != 2:
                    raise ShapeMismatchError("activations must be 2-D matrices")
                if d_in is None:
                    d_in = m.shape[1]
                elif m.shape[1] != d_in:
                    raise ShapeMismatchError(
                        f"inconsistent channel count: {m.shape[1]} vs {d_in}"
                    )
        object.__setattr__(self, "per_t", per_t)
        object.__setattr__(self, "timesteps", ts)

    @property
    def num_timesteps(self) -> int:
        return len(self.per_t)

    @property
    def d_in(self) -> int:
        return self.per_t[0][0].shape[1]

    def salience_per_timestep(self) -> np.ndarray:
        """(T x d_in) matrix of pooled per-timestep channel saliences."""
        return np.stack([activation_salience(batch) for batch in self.per_t])

    def pooled(self) -> list:
        """All samples across timesteps as one flat batch."""
        return [m for batch in self.per_t for m in batch]


def eta_weights(saliences, sw) -> SpearmanWeights:
    """Softmax of negated Spearman correlations between each timestep's
    activation salience and the weight salience."""
    sal = np.atleast_2d(np.asarray(saliences, dtype=np.float64))
    sw = as_vector(sw, "sw")
    if sal.ndim != 2 or sal.shape[1] != sw.size:
        raise ShapeMismatchError(
            f"salience stack of shape {sal.shape} does not match weight salience "
            f"of length {sw.size}"
        )
    rho = np.array([spearman_rho(sal[t], sw) for t in range(sal.shape[0])])
    z = -rho
    z = z - z.max()  # max-subtraction; mathematically a no-op
    e = np.exp(z)
    return SpearmanWeights(eta=e / e.sum(), rho=rho)


def temporal_salience(saliences, weights: SpearmanWeights) -> np.ndarray:
    """Convex per-channel combination of per-timestep saliences."""
    sal = np.atleast_2d(np.asarray(saliences, dtype=np.float64))
    if sal.shape[0] != weights.num_timesteps:
        raise ShapeMismatchError(
            f"{sal.shape[0]} salience vectors but {weights.num_timesteps} weights"
        )
    return weights.eta @ sal


@dataclass(frozen=True)
class LayerCalibration:
    """Balancing decision for one layer plus the statistics that led to it."""

    pair: BalancingPair
    weights: SpearmanWeights
    per_timestep_salience: np.ndarray  # (T, d_in)
    weight_salience: np.ndarray  # (d_in,)
    temporal_salience: np.ndarray  # (d_in,) aggregated activation salience
    balanced_salience: np.ndarray = field(repr=False, default=None)

    @property
    def overall_pre(self) -> float:
        """Worst collectively-quantized range before balancing."""
        return float(
            max(self.temporal_salience.max(), self.weight_salience.max())
        )

    @property
    def overall_post(self) -> float:
        """Worst range after balancing (both sides meet at the geometric mean)."""
        return float(self.balanced_salience.max())


def calibrate_layer(
    acts: TimestepActivations, w, eps: float = SALIENCE_EPS
) -> LayerCalibration:
    """Full temporal calibration of one linear layer.

    Computes per-timestep activation saliences, correlation-derived timestep
    weights, the aggregated activation salience and finally the balancing
    pair against the layer's weight salience. With a single timestep this
    reduces exactly to plain channel-wise balancing on that batch.
    """
    w = as_matrix(w, "w")
    if w.shape[0] != acts.d_in:
        raise ShapeMismatchError(
            f"weight has {w.shape[0]} input channels, activations have {acts.d_in}"
        )
    sal_t = acts.salience_per_timestep()
    sw = weight_salience(w)
    weights = eta_weights(sal_t, sw)
    s_agg = temporal_salience(sal_t, weights)
    pair = build_balancing(s_agg, sw, eps)
    s_bal = balanced_salience(np.maximum(s_agg, eps), np.maximum(sw, eps))
    return LayerCalibration(
        pair=pair,
        weights=weights,
        per_timestep_salience=sal_t,
        weight_salience=sw,
        temporal_salience=s_agg,
        balanced_salience=s_bal,
    )
