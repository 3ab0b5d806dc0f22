"""Desk-scale diffusion-transformer block and synthetic calibration data.

One block is a residual multi-head self-attention stage followed by a
residual pointwise feedforward stage, each fed through a conditioned layer
norm whose scale/shift are regressed from a conditioning vector. The
generator replaces a real sampler: a "timestep" is an index into a drift
schedule that modulates designated channels of the conditioning input.

The shift-regression map carries a unit diagonal, so amplified conditioning
channels turn into proportional per-channel activation offsets downstream of
the layer norm (which would otherwise squash any amplification of the noised
latent itself). Weight-side outliers are injected by scaling designated
rows of the linear weights. Together these reproduce, in a controlled way,
the two effects the calibration machinery exists for: channels whose
magnitude dwarfs the rest, and activation outliers that drift over
timesteps while weights stay put.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidProfileError, InvalidShapeError, ShapeMismatchError
from .ops import gelu, softmax_rows
from .quant import (
    DEFAULT_SHRINK_GRID,
    Granularity,
    fake_quantize,
    fit_mse_search,
)
from .reparam import AdaLNParams, adaln_forward
from .salience import activation_salience, weight_salience
from .temporal import TimestepActivations, spearman_rho
from .validation import as_matrix, as_vector

LAYER_KINDS = ("qkv", "proj", "fc1", "fc2")

# Balancing placement per layer: the two post-norm layers absorb activation
# factors into the scale/shift regression, the attention output projection
# absorbs them into the preceding matrix multiplication, and the second
# feedforward layer sits behind a nonlinearity so nothing can absorb them.
LAYER_ROLES = {
    "qkv": "post_adaln",
    "proj": "post_matmul",
    "fc1": "post_adaln",
    "fc2": "unbalanced",
}


def layer_name(block_index: int, kind: str, num_blocks: int) -> str:
    return kind if num_blocks == 1 else f"block{block_index}.{kind}"


@dataclass(frozen=True)
class SalienceProfile:
    """Which channels to make salient, how strongly, and how they drift."""

    salient_channels: tuple = ()
    magnitude_scale: tuple = ()
    temporal_drift: tuple | None = None

    def __post_init__(self):
        channels = tuple(int(c) for c in self.salient_channels)
        if len(set(channels)) != len(channels):
            raise InvalidProfileError("salient channels must be unique")
        if any(c < 0 for c in channels):
            raise InvalidProfileError("salient channel indices must be nonnegative")
        scale = self.magnitude_scale
        if np.isscalar(scale):
            scales = tuple(float(scale) for _ in channels)
        else:
            scales = tuple(float(s) for s in scale)
        if len(scales) != len(channels):
            raise InvalidProfileError(
                f"{len(channels)} salient channels but {len(scales)} magnitude scales"
            )
        if any(s <= 0 for s in scales):
            raise InvalidProfileError("magnitude scales must be positive")
        drift = self.temporal_drift
        if drift is not None:
            drift = tuple(float(m) for m in drift)
            if any(m <= 0 for m in drift):
                raise InvalidProfileError("drift multipliers must be positive")
        object.__setattr__(self, "salient_channels", channels)
        object.__setattr__(self, "magnitude_scale", scales)
        object.__setattr__(self, "temporal_drift", drift)

    def drift_schedule(self, num_timesteps: int) -> np.ndarray:
        if self.temporal_drift is None:
            return np.ones(num_timesteps)
        if len(self.temporal_drift) != num_timesteps:
            raise InvalidProfileError(
                f"drift schedule has {len(self.temporal_drift)} entries, "
                f"expected {num_timesteps}"
            )
        return np.asarray(self.temporal_drift, dtype=np.float64)

    def restrict(self, indices) -> "SalienceProfile":
        """Profile restricted to a subset of schedule indices."""
        if self.temporal_drift is None:
            return self
        drift = tuple(self.temporal_drift[i] for i in indices)
        return SalienceProfile(self.salient_channels, self.magnitude_scale, drift)

    def check_channels(self, d_in: int) -> None:
        if any(c >= d_in for c in self.salient_channels):
            raise InvalidProfileError(
                f"salient channel index out of range for d_in={d_in}"
            )


@dataclass(frozen=True)
class DiTBlockParams:
    """Parameters of one block; weights are stored as d_in x d_out."""

    adaln1: AdaLNParams
    adaln2: AdaLNParams
    w_qkv: np.ndarray
    b_qkv: np.ndarray
    w_proj: np.ndarray
    b_proj: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray
    heads: int
    mlp_ratio: int

    def __post_init__(self):
        d = self.w_qkv.shape[0]
        r = int(self.mlp_ratio)
        expected = {
            "w_qkv": (d, 3 * d),
            "w_proj": (d, d),
            "w_fc1": (d, r * d),
            "w_fc2": (r * d, d),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise InvalidShapeError(f"{name} must have shape {shape}, got {got}")
        for name, size in (
            ("b_qkv", 3 * d),
            ("b_proj", d),
            ("b_fc1", r * d),
            ("b_fc2", d),
        ):
            if getattr(self, name).shape != (size,):
                raise InvalidShapeError(f"{name} must have length {size}")
        if self.heads < 1 or d % self.heads != 0:
            raise InvalidShapeError(
                f"heads={self.heads} must divide the channel count {d}"
            )
        if self.adaln1.d_in != d or self.adaln2.d_in != d:
            raise InvalidShapeError("scale/shift maps must emit d_in channels")

    @property
    def d_in(self) -> int:
        return self.w_qkv.shape[0]

    def weights(self) -> dict:
        """(weight, bias) per layer kind."""
        return {
            "qkv": (self.w_qkv, self.b_qkv),
            "proj": (self.w_proj, self.b_proj),
            "fc1": (self.w_fc1, self.b_fc1),
            "fc2": (self.w_fc2, self.b_fc2),
        }


def _init_adaln(rng, d_in: int, identity_shift: bool) -> AdaLNParams:
    w_gamma = (rng.standard_normal((d_in, d_in)) * (0.1 / np.sqrt(d_in))).astype(
        np.float32
    )
    # Off-diagonal shift mixing is kept small so conditioning channel j feeds
    # shift channel j nearly one to one; this is the conduit that carries
    # injected conditioning amplitudes into per-channel activation offsets.
    w_beta = (rng.standard_normal((d_in, d_in)) * (0.02 / np.sqrt(d_in))).astype(
        np.float32
    )
    if identity_shift:
        w_beta = w_beta + np.eye(d_in, dtype=np.float32)
    b_gamma = (rng.standard_normal(d_in) * 0.1).astype(np.float32)
    b_beta = (rng.standard_normal(d_in) * 0.1).astype(np.float32)
    return AdaLNParams(w_gamma, w_beta, b_gamma, b_beta)


def init_block(
    d_in: int,
    heads: int,
    mlp_ratio: int,
    seed,
    weight_profile: SalienceProfile | None = None,
) -> DiTBlockParams:
    """Random block parameters, deterministic per seed.

    Linear weights are zero-mean with standard deviation one over the square
    root of their input dimension; rows named in ``weight_profile`` are then
    scaled up to create weight-side outlier channels.
    """
    if d_in < 2 or heads < 1 or d_in % heads != 0:
        raise InvalidShapeError(
            f"need d_in >= 2 divisible by heads, got d_in={d_in}, heads={heads}"
        )
    if mlp_ratio < 1:
        raise InvalidShapeError("mlp_ratio must be at least 1")
    rng = np.random.default_rng(seed)

    def _linear(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32)

    def _bias(size):
        return (rng.standard_normal(size) * 0.05).astype(np.float32)

    w_qkv = _linear(d_in, 3 * d_in)
    b_qkv = _bias(3 * d_in)
    w_proj = _linear(d_in, d_in)
    b_proj = _bias(d_in)
    w_fc1 = _linear(d_in, mlp_ratio * d_in)
    b_fc1 = _bias(mlp_ratio * d_in)
    w_fc2 = _linear(mlp_ratio * d_in, d_in)
    b_fc2 = _bias(d_in)
    adaln1 = _init_adaln(rng, d_in, identity_shift=True)
    adaln2 = _init_adaln(rng, d_in, identity_shift=True)

    if weight_profile is not None:
        weight_profile.check_channels(d_in)
        for j, s in zip(weight_profile.salient_channels, weight_profile.magnitude_scale):
            w_qkv[j, :] *= np.float32(s)
            w_proj[j, :] *= np.float32(s)
            w_fc1[j, :] *= np.float32(s)

    return DiTBlockParams(
        adaln1=adaln1,
        adaln2=adaln2,
        w_qkv=w_qkv,
        b_qkv=b_qkv,
        w_proj=w_proj,
        b_proj=b_proj,
        w_fc1=w_fc1,
        b_fc1=b_fc1,
        w_fc2=w_fc2,
        b_fc2=b_fc2,
        heads=heads,
        mlp_ratio=mlp_ratio,
    )


def init_stack(
    num_blocks: int,
    d_in: int,
    heads: int,
    mlp_ratio: int,
    seed,
    weight_profile: SalienceProfile | None = None,
) -> list:
    """Independent blocks with per-block seeds spawned from one root seed."""
    if num_blocks < 1:
        raise InvalidShapeError("need at least one block")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    children = seed.spawn(num_blocks)
    return [
        init_block(d_in, heads, mlp_ratio, child, weight_profile)
        for child in children
    ]


def mhsa(qkv: np.ndarray, heads: int) -> np.ndarray:
    """Per-head scaled dot-product attention over a fused QKV activation."""
    n, three_d = qkv.shape
    d = three_d // 3
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    dh = d // heads
    scale = 1.0 / float(np.sqrt(dh))
    out = np.empty((n, d), dtype=qkv.dtype)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        out[:, sl] = softmax_rows(scores) @ v[:, sl]
    return out


def forward_block(params: DiTBlockParams, z, c):
    """One block forward; returns the output and the four linear-layer inputs.

    Taps: "qkv" (post-norm input of the fused projection), "proj" (attention
    output), "fc1" (post-norm input of the first feedforward), "fc2" (the
    nonlinearity output feeding the second feedforward).
    """
    z = as_matrix(z, "z")
    if z.shape[1] != params.d_in:
        raise ShapeMismatchError(
            f"input has {z.shape[1]} channels, block expects {params.d_in}"
        )
    x1 = adaln_forward(z, params.adaln1, c)
    attn = mhsa(x1 @ params.w_qkv + params.b_qkv, params.heads)
    z_mid = z + (attn @ params.w_proj + params.b_proj)
    x2 = adaln_forward(z_mid, params.adaln2, c)
    hidden = gelu(x2 @ params.w_fc1 + params.b_fc1)
    out = z_mid + (hidden @ params.w_fc2 + params.b_fc2)
    taps = {"qkv": x1, "proj": attn, "fc1": x2, "fc2": hidden}
    return out, taps


def forward_stack(blocks, z, c):
    """Chained blocks; tap names carry a block prefix when stacking."""
    num_blocks = len(blocks)
    taps = {}
    out = z
    for i, block in enumerate(blocks):
        out, block_taps = forward_block(block, out, c)
        for kind, arr in block_taps.items():
            taps[layer_name(i, kind, num_blocks)] = arr
    return out, taps


def as_profiles(act_profile) -> tuple:
    """Normalize one profile or a sequence of them; designated channels must
    not collide across profiles."""
    if isinstance(act_profile, SalienceProfile):
        profiles = (act_profile,)
    else:
        profiles = tuple(act_profile)
        if not profiles or not all(isinstance(p, SalienceProfile) for p in profiles):
            raise InvalidProfileError("expected one or more salience profiles")
    seen = set()
    for p in profiles:
        overlap = seen.intersection(p.salient_channels)
        if overlap:
            raise InvalidProfileError(
                f"channels {sorted(overlap)} appear in more than one profile"
            )
        seen.update(p.salient_channels)
    return profiles


def designated_channels(act_profile) -> tuple:
    """Union of the designated channels across profiles, sorted."""
    channels = []
    for p in as_profiles(act_profile):
        channels.extend(p.salient_channels)
    return tuple(sorted(channels))


def draw_block_inputs(rng, n_tokens: int, d_in: int, profiles, amps):
    """One (latent, conditioning) pair with designated conditioning channels
    amplified per profile; ``amps[i]`` holds the per-channel amplitudes of
    ``profiles[i]`` at the current timestep."""
    z = rng.standard_normal((n_tokens, d_in)).astype(np.float32)
    c = rng.standard_normal(d_in).astype(np.float32)
    for profile, amp in zip(profiles, amps):
        for j, a in zip(profile.salient_channels, amp):
            sign = 1.0 if rng.random() < 0.5 else -1.0
            c[j] = np.float32(a * sign * (1.0 + 0.1 * rng.standard_normal()))
    return z, c


def input_stream(
    act_profile,
    num_timesteps: int,
    samples_per_t: int,
    seed,
    n_tokens: int,
    d_in: int,
):
    """Yield ``(t, z, c)`` in the deterministic (timestep, sample) order.

    At timestep ``t`` each profile's designated conditioning channels are
    amplified by ``magnitude_scale * drift[t]``.
    """
    if num_timesteps < 1 or samples_per_t < 1:
        raise InvalidProfileError("need at least one timestep and one sample")
    profiles = as_profiles(act_profile)
    for p in profiles:
        p.check_channels(d_in)
    drifts = [p.drift_schedule(num_timesteps) for p in profiles]
    scales = [np.asarray(p.magnitude_scale, dtype=np.float64) for p in profiles]
    rng = np.random.default_rng(seed)
    for t in range(num_timesteps):
        amps = [s * drift[t] for s, drift in zip(scales, drifts)]
        for _ in range(samples_per_t):
            yield t, *draw_block_inputs(rng, n_tokens, d_in, profiles, amps)


def gen_calibration(
    params,
    num_timesteps: int,
    samples_per_t: int,
    act_profile,
    seed,
    n_tokens: int = 16,
    timesteps=None,
) -> dict:
    """Synthetic per-timestep activations for every tapped layer.

    Runs the block forward over :func:`input_stream` draws and records each
    linear-layer input. Deterministic per seed.
    """
    blocks = [params] if isinstance(params, DiTBlockParams) else list(params)
    d_in = blocks[0].d_in
    ts = list(range(num_timesteps)) if timesteps is None else [int(t) for t in timesteps]
    if len(ts) != num_timesteps:
        raise InvalidProfileError(
            f"{len(ts)} timestep labels for {num_timesteps} timesteps"
        )
    num_blocks = len(blocks)
    names = [
        layer_name(i, kind, num_blocks)
        for i in range(num_blocks)
        for kind in LAYER_KINDS
    ]
    collected = {name: [[] for _ in range(num_timesteps)] for name in names}
    for t, z, c in input_stream(
        act_profile, num_timesteps, samples_per_t, seed, n_tokens, d_in
    ):
        _, taps = forward_stack(blocks, z, c)
        for name, arr in taps.items():
            collected[name][t].append(arr)
    return {
        name: TimestepActivations(per_t=batches, timesteps=ts)
        for name, batches in collected.items()
    }


@dataclass(frozen=True)
class ChallengeReport:
    """Channel-level quantization difficulty data for one layer."""

    act_salience: np.ndarray  # (d_in,) pooled over timesteps
    act_channel_mse: np.ndarray  # (d_in,) per-tensor quantization error
    act_rank_corr: float
    weight_salience: np.ndarray  # (d_in,)
    weight_channel_mse: np.ndarray  # (d_in,) per input channel
    weight_rank_corr: float
    per_timestep_salience: np.ndarray  # (T, d_in)
    drift_ratio: np.ndarray  # (d_in,) max over t / min over t
    per_timestep_quantiles: np.ndarray  # (T, 5): min, q25, median, q75, max


def challenge_report(
    acts: TimestepActivations, w, bits: int, shrink_grid=DEFAULT_SHRINK_GRID
) -> ChallengeReport:
    """Quantify how channel salience maps to quantization error.

    Activations are quantized per tensor and weights per output channel,
    both with an MSE-optimal clipping range, so out-of-range extremes are
    truncated exactly as a calibrated quantizer would truncate them. The
    per-channel error is then rank-correlated against channel salience, and
    the per-timestep salience spread is summarized for the drift picture.
    """
    w = as_matrix(w, "w")
    pooled = np.concatenate([np.asarray(m) for m in acts.pooled()], axis=0)
    sal_act = activation_salience([pooled])

    act_params = fit_mse_search(pooled, bits, Granularity.PER_TENSOR, shrink_grid)
    act_err = pooled.astype(np.float64) - fake_quantize(
        pooled.astype(np.float64), act_params
    )
    act_mse = np.mean(act_err * act_err, axis=0)
    act_corr = spearman_rho(sal_act, act_mse) if sal_act.size >= 2 else 0.0

    sal_w = weight_salience(w)
    w_params = fit_mse_search(w, bits, Granularity.PER_OUTPUT_CHANNEL, shrink_grid)
    w_err = w.astype(np.float64) - fake_quantize(w.astype(np.float64), w_params)
    w_mse = np.mean(w_err * w_err, axis=1)
    w_corr = spearman_rho(sal_w, w_mse) if sal_w.size >= 2 else 0.0

    sal_t = acts.salience_per_timestep()
    ratio = sal_t.max(axis=0) / np.maximum(sal_t.min(axis=0), 1e-12)
    quantiles = np.quantile(sal_t, [0.0, 0.25, 0.5, 0.75, 1.0], axis=1).T

    return ChallengeReport(
        act_salience=sal_act,
        act_channel_mse=act_mse,
        act_rank_corr=float(act_corr),
        weight_salience=sal_w,
        weight_channel_mse=w_mse,
        weight_rank_corr=float(w_corr),
        per_timestep_salience=sal_t,
        drift_ratio=ratio,
        per_timestep_quantiles=quantiles,
    )
