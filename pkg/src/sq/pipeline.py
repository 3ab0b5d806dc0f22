"""End-to-end pipeline behind the ``sq`` command line tool.

Stages: build or load the block stack, estimate per-timestep salience and
balancing factors (calibrate), fold the factors offline and fit quantization
parameters on the balanced tensors (quantize), compare the fake-quantized
stack against full precision on held-out inputs (evaluate), reproduce the
channel-difficulty statistics (challenge), and re-check every artifact
invariant (verify).

All stages are pure functions of (config, artifacts); reruns produce
byte-identical artifacts. Reports carry the config hash; the only volatile
field anywhere is ``generated_at`` in ``report.json``.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    SEED_CALIBRATION,
    SEED_EVAL,
    SEED_MODEL,
    PipelineConfig,
)
from .container import read_tensors, write_tensors
from .errors import ArtifactLockError, ConfigError, MissingArtifactError
from .ops import gelu
from .quant import (
    DEFAULT_SHRINK_GRID,
    Granularity,
    QuantParams,
    QuantizedTensor,
    dequantize,
    fake_quantize,
    fit_minmax,
    fit_mse_search,
    quant_error_mse,
    quantize,
)
from .reparam import (
    AdaLNParams,
    balanced_adaln_forward,
    fold_adaln,
    fold_dequant_scales,
    fold_weight,
    verify_equivalence,
)
from .salience import BalancingPair, activation_salience, build_balancing, weight_salience
from .sim import (
    LAYER_KINDS,
    LAYER_ROLES,
    DiTBlockParams,
    challenge_report,
    forward_stack,
    init_stack,
    input_stream,
    layer_name,
    mhsa,
)
from .temporal import TimestepActivations, calibrate_layer

MODEL_FILE = "model.sqt"
CALIBRATION_FILE = "calibration.sqt"
CHECKPOINT_FILE = "checkpoint.sqt"
META_FILE = "meta.json"
REPORT_FILE = "report.json"
PER_LAYER_CSV = "per_layer.csv"
LOCK_FILE = ".lock"

EQUIVALENCE_TOL = 1e-4  # no-quantization fold deviation, single precision
FOLD_ALERT_TOL = 1e-3

BALANCEABLE = ("qkv", "proj", "fc1")

_ADALN_FIELDS = ("w_gamma", "w_beta", "b_gamma", "b_beta")
_LINEAR_FIELDS = (
    ("w_qkv", "b_qkv"),
    ("w_proj", "b_proj"),
    ("w_fc1", "b_fc1"),
    ("w_fc2", "b_fc2"),
)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    block_index: int
    kind: str
    role: str


def layer_specs(num_blocks: int) -> list:
    return [
        LayerSpec(layer_name(i, kind, num_blocks), i, kind, LAYER_ROLES[kind])
        for i in range(num_blocks)
        for kind in LAYER_KINDS
    ]


@dataclass(frozen=True)
class RawPair:
    """Balancing factors without the inverse-pair validation; used when
    checking possibly corrupted artifacts."""

    bx: np.ndarray
    bw: np.ndarray

    @property
    def d_in(self) -> int:
        return self.bx.size


# ---------------------------------------------------------------------------
# model construction / (de)serialization


def build_model(cfg: PipelineConfig) -> list:
    model = cfg.raw["model"]
    if model["container"] is not None:
        return tensors_to_model(read_tensors(model["container"]))
    return init_stack(
        model["blocks"],
        model["d_in"],
        model["heads"],
        model["mlp_ratio"],
        cfg.seed_for(SEED_MODEL),
        cfg.weight_profile,
    )


def model_to_tensors(blocks) -> dict:
    out = {
        "model/num_blocks": np.int32(len(blocks)),
        "model/heads": np.int32(blocks[0].heads),
        "model/mlp_ratio": np.int32(blocks[0].mlp_ratio),
    }
    for i, blk in enumerate(blocks):
        base = f"model/block{i}"
        for w_name, b_name in _LINEAR_FIELDS:
            out[f"{base}/{w_name}"] = getattr(blk, w_name)
            out[f"{base}/{b_name}"] = getattr(blk, b_name)
        for j, ad in ((1, blk.adaln1), (2, blk.adaln2)):
            for field_name in _ADALN_FIELDS:
                out[f"{base}/adaln{j}/{field_name}"] = getattr(ad, field_name)
    return out


def tensors_to_model(tensors: dict) -> list:
    try:
        num_blocks = int(tensors["model/num_blocks"])
        heads = int(tensors["model/heads"])
        mlp_ratio = int(tensors["model/mlp_ratio"])
        blocks = []
        for i in range(num_blocks):
            base = f"model/block{i}"
            adalns = {
                j: AdaLNParams(
                    *(tensors[f"{base}/adaln{j}/{f}"] for f in _ADALN_FIELDS)
                )
                for j in (1, 2)
            }
            kwargs = {}
            for w_name, b_name in _LINEAR_FIELDS:
                kwargs[w_name] = tensors[f"{base}/{w_name}"]
                kwargs[b_name] = tensors[f"{base}/{b_name}"]
            blocks.append(
                DiTBlockParams(
                    adaln1=adalns[1], adaln2=adalns[2],
                    heads=heads, mlp_ratio=mlp_ratio, **kwargs,
                )
            )
    except KeyError as exc:
        raise MissingArtifactError(f"model container is missing tensor {exc}") from exc
    return blocks


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class LayerBalancing:
    """Balancing decision plus diagnostics for one layer."""

    mode: str  # "ssc" | "midpoint" | "off"
    pair: BalancingPair
    salience_per_t: np.ndarray  # (T, d_in)
    weight_salience: np.ndarray
    temporal_salience: np.ndarray  # aggregated activation salience estimate
    rho: np.ndarray | None
    eta: np.ndarray | None
    so_pre: float
    so_post: float


@dataclass(frozen=True)
class CalibrationResult:
    layers: dict  # name -> LayerBalancing
    taps: dict  # name -> TimestepActivations


def _balance_layer(cfg: PipelineConfig, acts: TimestepActivations, w, enabled: bool) -> LayerBalancing:
    eps = cfg.raw["balancing"]["eps"]
    sal_t = acts.salience_per_timestep()
    sw = weight_salience(w)
    pooled_max = sal_t.max(axis=0)
    if not enabled:
        so = float(max(pooled_max.max(), sw.max()))
        return LayerBalancing(
            mode="off",
            pair=BalancingPair.identity(acts.d_in),
            salience_per_t=sal_t,
            weight_salience=sw,
            temporal_salience=pooled_max,
            rho=None,
            eta=None,
            so_pre=so,
            so_post=so,
        )
    if cfg.raw["balancing"]["ssc_enabled"]:
        cal = calibrate_layer(acts, w, eps)
        return LayerBalancing(
            mode="ssc",
            pair=cal.pair,
            salience_per_t=sal_t,
            weight_salience=sw,
            temporal_salience=cal.temporal_salience,
            rho=cal.weights.rho,
            eta=cal.weights.eta,
            so_pre=cal.overall_pre,
            so_post=cal.overall_post,
        )
    # Midpoint variant: balance from the middle timestep's distribution only.
    mid = acts.num_timesteps // 2
    s_mid = sal_t[mid]
    pair = build_balancing(s_mid, sw, eps)
    eta = np.zeros(acts.num_timesteps)
    eta[mid] = 1.0
    balanced = np.sqrt(np.maximum(s_mid, eps) * np.maximum(sw, eps))
    return LayerBalancing(
        mode="midpoint",
        pair=pair,
        salience_per_t=sal_t,
        weight_salience=sw,
        temporal_salience=s_mid,
        rho=None,
        eta=eta,
        so_pre=float(max(s_mid.max(), sw.max())),
        so_post=float(balanced.max()),
    )


def calibrate_model(cfg: PipelineConfig, blocks, taps: dict | None = None) -> CalibrationResult:
    from .sim import gen_calibration

    if taps is None:
        taps = gen_calibration(
            blocks,
            cfg.raw["calibration"]["timesteps"],
            cfg.raw["calibration"]["samples_per_t"],
            cfg.calibration_profiles,
            cfg.seed_for(SEED_CALIBRATION),
            n_tokens=cfg.raw["model"]["n_tokens"],
            timesteps=cfg.selected_timesteps,
        )
    enabled = cfg.raw["balancing"]["layers"]
    layers = {}
    for spec in layer_specs(len(blocks)):
        w, _ = blocks[spec.block_index].weights()[spec.kind]
        layer_enabled = spec.kind in BALANCEABLE and enabled.get(spec.kind, False)
        layers[spec.name] = _balance_layer(cfg, taps[spec.name], w, layer_enabled)
    return CalibrationResult(layers=layers, taps=taps)


# ---------------------------------------------------------------------------
# quantization


@dataclass
class QuantizedModel:
    """Folded, optionally fake-quantized stack ready for evaluation."""

    blocks: list
    pairs: dict  # name -> BalancingPair (or RawPair during verification)
    folded_weights: dict  # name -> float32 weight
    folded_adaln: list  # per block: (adaln1, adaln2)
    eval_weights: dict  # name -> weight used in the forward (fake-quantized)
    weight_params: dict | None  # name -> QuantParams, None in pass-through
    act_params: dict | None  # name -> QuantParams on the balanced input
    act_params_raw: dict  # proj absorb mode: name -> pre-fold QuantParams
    proj_mode: str  # "explicit" | "absorb"

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def name(self, block_index: int, kind: str) -> str:
        return layer_name(block_index, kind, self.num_blocks)


def _fit(cfg: PipelineConfig, x, bits: int, granularity) -> QuantParams:
    if cfg.raw["quant"]["fitter"] == "mse_search":
        grid = cfg.raw["quant"]["shrink_grid"] or DEFAULT_SHRINK_GRID
        return fit_mse_search(x, bits, granularity, grid)
    return fit_minmax(x, bits, granularity)


def _pooled(acts: TimestepActivations) -> np.ndarray:
    return np.concatenate([np.asarray(m) for m in acts.pooled()], axis=0)


def fold_model(blocks, pairs: dict) -> tuple:
    """Fold balancing pairs into weights and scale/shift regressions."""
    num_blocks = len(blocks)
    folded_weights = {}
    folded_adaln = []
    for i, blk in enumerate(blocks):
        for kind in LAYER_KINDS:
            name = layer_name(i, kind, num_blocks)
            w, _ = blk.weights()[kind]
            folded_weights[name] = fold_weight(w, pairs[name]).w_tilde
        folded_adaln.append(
            (
                fold_adaln(blk.adaln1, pairs[layer_name(i, "qkv", num_blocks)]),
                fold_adaln(blk.adaln2, pairs[layer_name(i, "fc1", num_blocks)]),
            )
        )
    return folded_weights, folded_adaln


def quantize_model(cfg: PipelineConfig, blocks, calib: CalibrationResult) -> QuantizedModel:
    quant = cfg.raw["quant"]
    num_blocks = len(blocks)
    pairs = {name: lb.pair for name, lb in calib.layers.items()}
    folded_weights, folded_adaln = fold_model(blocks, pairs)

    proj_mode = cfg.raw["balancing"]["projection2"]
    if proj_mode == "auto":
        proj_mode = (
            "absorb"
            if quant["act_granularity"] == "per_output_channel" and not cfg.act_passthrough
            else "explicit"
        )
    if proj_mode == "absorb" and cfg.act_passthrough:
        proj_mode = "explicit"

    weight_params = None
    if not cfg.weight_passthrough:
        weight_params = {
            name: _fit(cfg, w, quant["weight_bits"], Granularity(quant["weight_granularity"]))
            for name, w in folded_weights.items()
        }

    act_params = None
    act_params_raw = {}
    if not cfg.act_passthrough:
        act_params = {}
        granularity = Granularity(quant["act_granularity"])
        for spec in layer_specs(num_blocks):
            pooled = _pooled(calib.taps[spec.name])
            pair = pairs[spec.name]
            if spec.kind == "proj" and proj_mode == "absorb":
                # Fit on the raw matrix-multiplication output; balancing rides
                # in the folded dequantization scales.
                raw = _fit(cfg, pooled, quant["act_bits"], granularity)
                act_params_raw[spec.name] = raw
                act_params[spec.name] = fold_dequant_scales(raw, pair)
            else:
                balanced = pooled * pair.bx.astype(pooled.dtype)
                act_params[spec.name] = _fit(cfg, balanced, quant["act_bits"], granularity)

    eval_weights = {}
    for name, w in folded_weights.items():
        if weight_params is None:
            eval_weights[name] = w
        else:
            eval_weights[name] = fake_quantize(w, weight_params[name])

    return QuantizedModel(
        blocks=blocks,
        pairs=pairs,
        folded_weights=folded_weights,
        folded_adaln=folded_adaln,
        eval_weights=eval_weights,
        weight_params=weight_params,
        act_params=act_params,
        act_params_raw=act_params_raw,
        proj_mode=proj_mode,
    )


# ---------------------------------------------------------------------------
# forwards


def _quantized_input(qm: QuantizedModel, name: str, kind: str, x):
    """Balanced (and, unless pass-through, fake-quantized) layer input."""
    pair = qm.pairs[name]
    if kind == "proj" and qm.proj_mode == "absorb" and qm.act_params is not None:
        # Quantize the raw matrix-multiplication output, dequantize with the
        # balancing-folded scales: the result arrives pre-balanced.
        codes = quantize(x, qm.act_params_raw[name]).codes
        folded = QuantizedTensor(codes, qm.act_params[name])
        return dequantize(folded).astype(x.dtype)
    balanced = x * pair.bx.astype(x.dtype)
    if qm.act_params is None:
        return balanced
    return fake_quantize(balanced, qm.act_params[name])


def quantized_forward(qm: QuantizedModel, z, c):
    """Forward through the folded, fake-quantized stack."""
    out = z
    for i, blk in enumerate(qm.blocks):
        n_qkv = qm.name(i, "qkv")
        n_proj = qm.name(i, "proj")
        n_fc1 = qm.name(i, "fc1")
        n_fc2 = qm.name(i, "fc2")
        ad1, ad2 = qm.folded_adaln[i]

        x1 = balanced_adaln_forward(out, ad1, qm.pairs[n_qkv], c)
        if qm.act_params is not None:
            x1 = fake_quantize(x1, qm.act_params[n_qkv])
        attn = mhsa(x1 @ qm.eval_weights[n_qkv] + blk.b_qkv, blk.heads)
        attn_q = _quantized_input(qm, n_proj, "proj", attn)
        z_mid = out + (attn_q @ qm.eval_weights[n_proj] + blk.b_proj)

        x2 = balanced_adaln_forward(z_mid, ad2, qm.pairs[n_fc1], c)
        if qm.act_params is not None:
            x2 = fake_quantize(x2, qm.act_params[n_fc1])
        hidden = gelu(x2 @ qm.eval_weights[n_fc1] + blk.b_fc1)
        hidden_q = _quantized_input(qm, n_fc2, "fc2", hidden)
        out = z_mid + (hidden_q @ qm.eval_weights[n_fc2] + blk.b_fc2)
    return out


def folded_forward(qm: QuantizedModel, z, c):
    """Forward through the folded stack with no quantization anywhere;
    deviation from the original forward measures the fold alone."""
    out = z
    for i, blk in enumerate(qm.blocks):
        n_qkv, n_proj = qm.name(i, "qkv"), qm.name(i, "proj")
        n_fc1, n_fc2 = qm.name(i, "fc1"), qm.name(i, "fc2")
        ad1, ad2 = qm.folded_adaln[i]
        x1 = balanced_adaln_forward(out, ad1, qm.pairs[n_qkv], c)
        attn = mhsa(x1 @ qm.folded_weights[n_qkv] + blk.b_qkv, blk.heads)
        attn_b = attn * qm.pairs[n_proj].bx.astype(attn.dtype)
        z_mid = out + (attn_b @ qm.folded_weights[n_proj] + blk.b_proj)
        x2 = balanced_adaln_forward(z_mid, ad2, qm.pairs[n_fc1], c)
        hidden = gelu(x2 @ qm.folded_weights[n_fc1] + blk.b_fc1)
        hidden_b = hidden * qm.pairs[n_fc2].bx.astype(hidden.dtype)
        out = z_mid + (hidden_b @ qm.folded_weights[n_fc2] + blk.b_fc2)
    return out


# ---------------------------------------------------------------------------
# evaluation


def eval_inputs(cfg: PipelineConfig, d_in: int):
    """Held-out (t, z, c) stream across all selected timesteps."""
    return input_stream(
        cfg.calibration_profiles,
        cfg.raw["calibration"]["timesteps"],
        cfg.raw["calibration"]["samples_per_t"],
        cfg.seed_for(SEED_EVAL),
        cfg.raw["model"]["n_tokens"],
        d_in,
    )


def evaluate_model(cfg: PipelineConfig, blocks, qm: QuantizedModel, calib: CalibrationResult) -> dict:
    num_blocks = len(blocks)
    specs = layer_specs(num_blocks)
    layer_err = {s.name: [0.0, 0] for s in specs}  # activation error: sq sum, count
    layer_out = {s.name: [0.0, 0] for s in specs}  # layer output error
    block_sq, block_cnt = 0.0, 0
    rel_devs = []
    fold_devs = []

    for _, z, c in eval_inputs(cfg, blocks[0].d_in):
        fp_out, fp_taps = forward_stack(blocks, z, c)
        q_out = quantized_forward(qm, z, c)
        f_out = folded_forward(qm, z, c)

        fp64 = fp_out.astype(np.float64)
        diff = fp64 - q_out.astype(np.float64)
        block_sq += float(np.sum(diff * diff))
        block_cnt += diff.size
        norm = float(np.linalg.norm(fp64))
        rel_devs.append(float(np.linalg.norm(diff) / max(norm, 1e-300)))
        fold_devs.append(
            float(np.linalg.norm(fp64 - f_out.astype(np.float64)) / max(norm, 1e-300))
        )

        for spec in specs:
            x = fp_taps[spec.name]
            pair = qm.pairs[spec.name]
            balanced = (x.astype(np.float64)) * pair.bx
            x_q = _quantized_input(qm, spec.name, spec.kind, x)
            a_diff = balanced - x_q.astype(np.float64)
            layer_err[spec.name][0] += float(np.sum(a_diff * a_diff))
            layer_err[spec.name][1] += a_diff.size

            w, b = blocks[spec.block_index].weights()[spec.kind]
            ref = x.astype(np.float64) @ w.astype(np.float64) + b
            got = x_q.astype(np.float64) @ qm.eval_weights[spec.name].astype(np.float64) + b
            o_diff = ref - got
            layer_out[spec.name][0] += float(np.sum(o_diff * o_diff))
            layer_out[spec.name][1] += o_diff.size

    layers = {}
    for spec in specs:
        lb = calib.layers[spec.name]
        w_mse = (
            0.0
            if qm.weight_params is None
            else quant_error_mse(qm.folded_weights[spec.name], qm.weight_params[spec.name])
        )
        layers[spec.name] = {
            "role": spec.role,
            "w_mse": w_mse,
            "a_mse": layer_err[spec.name][0] / layer_err[spec.name][1],
            "out_mse": layer_out[spec.name][0] / layer_out[spec.name][1],
            "so_pre": lb.so_pre,
            "so_post": lb.so_post,
        }

    balancing = {}
    for spec in specs:
        lb = calib.layers[spec.name]
        entry = {"mode": lb.mode, "so_pre": lb.so_pre, "so_post": lb.so_post}
        if lb.eta is not None:
            if abs(float(np.sum(lb.eta)) - 1.0) > 1e-12:
                raise ConfigError("timestep weights must sum to 1")
            entry["eta"] = [float(v) for v in lb.eta]
        if lb.rho is not None:
            entry["rho"] = [float(v) for v in lb.rho]
        balancing[spec.name] = entry

    rel = np.asarray(rel_devs)
    fold_dev = float(max(fold_devs))
    report = {
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "passthrough": cfg.passthrough,
        "projection2_balancing": qm.proj_mode,
        "fold_deviation": fold_dev,
        "fold_alert": fold_dev > FOLD_ALERT_TOL,
        "block": {
            "out_mse": block_sq / block_cnt,
            "rel_dev_mean": float(rel.mean()),
            "rel_dev_max": float(rel.max()),
            "rel_dev_p50": float(np.quantile(rel, 0.5)),
            "rel_dev_p95": float(np.quantile(rel, 0.95)),
        },
        "layers": layers,
        "balancing": balancing,
    }
    for entry in layers.values():
        if min(entry["w_mse"], entry["a_mse"], entry["out_mse"]) < 0:
            raise ConfigError("mean squared errors must be nonnegative")
    return report


def challenge_model(cfg: PipelineConfig, blocks, taps: dict | None = None) -> dict:
    from .sim import gen_calibration

    bits = cfg.raw["quant"]["weight_bits"]
    if bits > 8:
        raise ConfigError("challenge statistics need a low-bit weight setting (<= 8)")
    if taps is None:
        taps = gen_calibration(
            blocks,
            cfg.raw["calibration"]["timesteps"],
            cfg.raw["calibration"]["samples_per_t"],
            cfg.calibration_profiles,
            cfg.seed_for(SEED_CALIBRATION),
            n_tokens=cfg.raw["model"]["n_tokens"],
            timesteps=cfg.selected_timesteps,
        )
    grid = cfg.raw["quant"]["shrink_grid"] or DEFAULT_SHRINK_GRID
    out = {}
    for spec in layer_specs(len(blocks)):
        w, _ = blocks[spec.block_index].weights()[spec.kind]
        out[spec.name] = challenge_report(taps[spec.name], w, bits, grid)
    return out


# ---------------------------------------------------------------------------
# artifact I/O


@contextmanager
def locked(artifacts: Path):
    artifacts = Path(artifacts)
    artifacts.mkdir(parents=True, exist_ok=True)
    lock_path = artifacts / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ArtifactLockError(
            f"{artifacts} is locked by another invocation ({lock_path} exists)"
        ) from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield artifacts
    finally:
        try:
            os.unlink(lock_path)
        except FileNotFoundError:
            pass


def _read_meta(artifacts: Path) -> dict:
    path = Path(artifacts) / META_FILE
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_meta(artifacts: Path, meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True, indent=2) + "\n"
    with open(Path(artifacts) / META_FILE, "w", encoding="utf-8") as fh:
        fh.write(blob)


def _check_meta(cfg: PipelineConfig, artifacts: Path, stage: str) -> dict:
    meta = _read_meta(artifacts)
    if stage not in meta.get("stages", {}):
        raise MissingArtifactError(
            f"artifacts in {artifacts} lack the '{stage}' stage; run `sq {stage}` first"
        )
    if meta.get("config_hash") != cfg.config_hash():
        raise ConfigError(
            f"artifacts in {artifacts} were produced by a different config "
            f"(hash {meta.get('config_hash')!r} != {cfg.config_hash()!r})"
        )
    return meta


def _require_file(artifacts: Path, filename: str) -> Path:
    path = Path(artifacts) / filename
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}")
    return path


def _calibration_tensors(cfg: PipelineConfig, calib: CalibrationResult) -> dict:
    tensors = {"timesteps": np.asarray(cfg.selected_timesteps, dtype=np.int32)}
    for name, lb in calib.layers.items():
        base = f"cal/{name}"
        tensors[f"{base}/salience_t"] = lb.salience_per_t
        tensors[f"{base}/weight_salience"] = lb.weight_salience
        tensors[f"{base}/temporal_salience"] = lb.temporal_salience
        tensors[f"{base}/bx"] = lb.pair.bx
        tensors[f"{base}/bw"] = lb.pair.bw
        if lb.rho is not None:
            tensors[f"{base}/rho"] = lb.rho
        if lb.eta is not None:
            tensors[f"{base}/eta"] = lb.eta
        acts = calib.taps[name]
        for t_label, batch in zip(acts.timesteps, acts.per_t):
            tensors[f"acts/{name}/{t_label}"] = np.stack(
                [np.asarray(m, dtype=np.float32) for m in batch]
            )
    return tensors


def _calibration_from_tensors(cfg: PipelineConfig, blocks, tensors: dict) -> CalibrationResult:
    ts = [int(t) for t in tensors["timesteps"]]
    layers = {}
    taps = {}
    for spec in layer_specs(len(blocks)):
        base = f"cal/{spec.name}"
        try:
            sal_t = tensors[f"{base}/salience_t"]
            sw = tensors[f"{base}/weight_salience"]
            s_agg = tensors[f"{base}/temporal_salience"]
            bx = tensors[f"{base}/bx"]
            bw = tensors[f"{base}/bw"]
        except KeyError as exc:
            raise MissingArtifactError(f"calibration container is missing {exc}") from exc
        rho = tensors.get(f"{base}/rho")
        eta = tensors.get(f"{base}/eta")
        mode = _layer_mode(cfg, spec)
        pair = BalancingPair(bx=bx, bw=bw)
        if mode == "off":
            so_pre = so_post = float(max(s_agg.max(), sw.max()))
        else:
            eps = cfg.raw["balancing"]["eps"]
            so_pre = float(max(s_agg.max(), sw.max()))
            so_post = float(
                np.sqrt(np.maximum(s_agg, eps) * np.maximum(sw, eps)).max()
            )
        layers[spec.name] = LayerBalancing(
            mode=mode,
            pair=pair,
            salience_per_t=sal_t,
            weight_salience=sw,
            temporal_salience=s_agg,
            rho=rho,
            eta=eta,
            so_pre=so_pre,
            so_post=so_post,
        )
        batches = [tensors[f"acts/{spec.name}/{t}"] for t in ts]
        taps[spec.name] = TimestepActivations(
            per_t=[list(batch) for batch in batches], timesteps=ts
        )
    return CalibrationResult(layers=layers, taps=taps)


def _layer_mode(cfg, spec) -> str:
    enabled = cfg.raw["balancing"]["layers"]
    if spec.kind not in BALANCEABLE or not enabled.get(spec.kind, False):
        return "off"
    return "ssc" if cfg.raw["balancing"]["ssc_enabled"] else "midpoint"


def _checkpoint_tensors(qm: QuantizedModel) -> dict:
    tensors = {}
    for name, w in qm.folded_weights.items():
        tensors[f"ckpt/{name}/w_folded"] = w
        tensors[f"ckpt/{name}/bx"] = qm.pairs[name].bx
        tensors[f"ckpt/{name}/bw"] = qm.pairs[name].bw
    for i, (ad1, ad2) in enumerate(qm.folded_adaln):
        for j, ad in ((1, ad1), (2, ad2)):
            for field_name in _ADALN_FIELDS:
                tensors[f"ckpt/block{i}/adaln{j}/{field_name}"] = getattr(ad, field_name)
    if qm.weight_params is not None:
        for name, params in qm.weight_params.items():
            _write_qparams(tensors, f"qparams/w/{name}", params)
            tensors[f"wcodes/{name}"] = quantize(
                qm.folded_weights[name], params
            ).codes
    if qm.act_params is not None:
        for name, params in qm.act_params.items():
            _write_qparams(tensors, f"qparams/a/{name}", params)
        for name, params in qm.act_params_raw.items():
            _write_qparams(tensors, f"qparams/a_raw/{name}", params)
    return tensors


_GRANULARITY_CODE = {Granularity.PER_TENSOR: 0, Granularity.PER_OUTPUT_CHANNEL: 1}
_CODE_GRANULARITY = {v: k for k, v in _GRANULARITY_CODE.items()}


def _write_qparams(tensors: dict, base: str, params: QuantParams) -> None:
    tensors[f"{base}/delta"] = params.delta
    tensors[f"{base}/zero_point"] = params.zero_point
    tensors[f"{base}/bits"] = np.int32(params.bits)
    tensors[f"{base}/granularity"] = np.uint8(_GRANULARITY_CODE[params.granularity])


def _read_qparams(tensors: dict, base: str) -> QuantParams:
    try:
        return QuantParams(
            bits=int(tensors[f"{base}/bits"]),
            delta=tensors[f"{base}/delta"],
            zero_point=tensors[f"{base}/zero_point"],
            granularity=_CODE_GRANULARITY[int(tensors[f"{base}/granularity"])],
        )
    except KeyError as exc:
        raise MissingArtifactError(f"checkpoint is missing {exc}") from exc


def _checkpoint_from_tensors(
    cfg: PipelineConfig, blocks, tensors: dict, meta: dict
) -> QuantizedModel:
    num_blocks = len(blocks)
    specs = layer_specs(num_blocks)
    pairs = {}
    folded_weights = {}
    for spec in specs:
        try:
            folded_weights[spec.name] = tensors[f"ckpt/{spec.name}/w_folded"]
            pairs[spec.name] = BalancingPair(
                bx=tensors[f"ckpt/{spec.name}/bx"], bw=tensors[f"ckpt/{spec.name}/bw"]
            )
        except KeyError as exc:
            raise MissingArtifactError(f"checkpoint is missing {exc}") from exc
    folded_adaln = []
    for i in range(num_blocks):
        ads = []
        for j in (1, 2):
            try:
                ads.append(
                    AdaLNParams(
                        *(tensors[f"ckpt/block{i}/adaln{j}/{f}"] for f in _ADALN_FIELDS)
                    )
                )
            except KeyError as exc:
                raise MissingArtifactError(f"checkpoint is missing {exc}") from exc
        folded_adaln.append(tuple(ads))

    weight_params = None
    if not cfg.weight_passthrough:
        weight_params = {s.name: _read_qparams(tensors, f"qparams/w/{s.name}") for s in specs}
    act_params = None
    act_params_raw = {}
    if not cfg.act_passthrough:
        act_params = {s.name: _read_qparams(tensors, f"qparams/a/{s.name}") for s in specs}
        for spec in specs:
            base = f"qparams/a_raw/{spec.name}"
            if f"{base}/delta" in tensors:
                act_params_raw[spec.name] = _read_qparams(tensors, base)

    eval_weights = {}
    for spec in specs:
        w = folded_weights[spec.name]
        eval_weights[spec.name] = (
            w if weight_params is None else fake_quantize(w, weight_params[spec.name])
        )
    return QuantizedModel(
        blocks=blocks,
        pairs=pairs,
        folded_weights=folded_weights,
        folded_adaln=folded_adaln,
        eval_weights=eval_weights,
        weight_params=weight_params,
        act_params=act_params,
        act_params_raw=act_params_raw,
        proj_mode=meta["stages"]["quantize"]["projection2_balancing"],
    )


# ---------------------------------------------------------------------------
# commands


def run_calibrate(cfg: PipelineConfig, artifacts) -> CalibrationResult:
    with locked(artifacts) as root:
        blocks = build_model(cfg)
        if cfg.raw["model"]["container"] is not None:
            shutil.copyfile(cfg.raw["model"]["container"], root / MODEL_FILE)
        else:
            write_tensors(root / MODEL_FILE, model_to_tensors(blocks))
        calib = calibrate_model(cfg, blocks)
        write_tensors(root / CALIBRATION_FILE, _calibration_tensors(cfg, calib))
        meta = _read_meta(root)
        if meta.get("config_hash") not in (None, cfg.config_hash()):
            meta = {}
        meta.update({"version": __version__, "config_hash": cfg.config_hash()})
        stages = meta.setdefault("stages", {})
        stages["calibrate"] = {
            "layers": {name: lb.mode for name, lb in calib.layers.items()},
            "timesteps": cfg.selected_timesteps,
        }
        stages.pop("quantize", None)
        _write_meta(root, meta)
        return calib


def run_quantize(cfg: PipelineConfig, artifacts) -> QuantizedModel:
    with locked(artifacts) as root:
        _check_meta(cfg, root, "calibrate")
        blocks = tensors_to_model(read_tensors(_require_file(root, MODEL_FILE)))
        calib = _calibration_from_tensors(
            cfg, blocks, read_tensors(_require_file(root, CALIBRATION_FILE))
        )
        qm = quantize_model(cfg, blocks, calib)
        write_tensors(root / CHECKPOINT_FILE, _checkpoint_tensors(qm))
        meta = _read_meta(root)
        meta["stages"]["quantize"] = {
            "projection2_balancing": qm.proj_mode,
            "weight_passthrough": cfg.weight_passthrough,
            "act_passthrough": cfg.act_passthrough,
        }
        _write_meta(root, meta)
        return qm


def run_evaluate(cfg: PipelineConfig, artifacts) -> dict:
    with locked(artifacts) as root:
        meta = _check_meta(cfg, root, "quantize")
        blocks = tensors_to_model(read_tensors(_require_file(root, MODEL_FILE)))
        calib = _calibration_from_tensors(
            cfg, blocks, read_tensors(_require_file(root, CALIBRATION_FILE))
        )
        qm = _checkpoint_from_tensors(
            cfg, blocks, read_tensors(_require_file(root, CHECKPOINT_FILE)), meta
        )
        report = evaluate_model(cfg, blocks, qm, calib)
        with open(root / REPORT_FILE, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
        _write_per_layer_csv(root / PER_LAYER_CSV, report)
        return report


def _write_per_layer_csv(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "role", "w_mse", "a_mse", "out_mse", "so_pre", "so_post"])
        for name, entry in report["layers"].items():
            writer.writerow(
                [
                    name,
                    entry["role"],
                    repr(float(entry["w_mse"])),
                    repr(float(entry["a_mse"])),
                    repr(float(entry["out_mse"])),
                    repr(float(entry["so_pre"])),
                    repr(float(entry["so_post"])),
                ]
            )


def run_challenge(cfg: PipelineConfig, artifacts) -> dict:
    with locked(artifacts) as root:
        blocks = build_model(cfg)
        reports = challenge_model(cfg, blocks)
        with open(root / "challenge_correlation.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["layer", "side", "spearman"])
            for name, rep in reports.items():
                writer.writerow([name, "activation", repr(rep.act_rank_corr)])
                writer.writerow([name, "weight", repr(rep.weight_rank_corr)])
        with open(root / "challenge_channels.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["layer", "channel", "act_salience", "act_mse",
                 "weight_salience", "weight_mse", "drift_ratio"]
            )
            for name, rep in reports.items():
                for j in range(rep.act_salience.size):
                    writer.writerow(
                        [
                            name,
                            j,
                            repr(float(rep.act_salience[j])),
                            repr(float(rep.act_channel_mse[j])),
                            repr(float(rep.weight_salience[j])),
                            repr(float(rep.weight_channel_mse[j])),
                            repr(float(rep.drift_ratio[j])),
                        ]
                    )
        with open(root / "challenge_temporal.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["layer", "timestep", "min", "q25", "median", "q75", "max"])
            for name, rep in reports.items():
                for t, row in enumerate(rep.per_timestep_quantiles):
                    writer.writerow([name, t] + [repr(float(v)) for v in row])
        return reports


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    checks: tuple  # (name, ok, detail)


def run_verify(cfg: PipelineConfig, artifacts) -> VerifyResult:
    with locked(artifacts) as root:
        checks = []

        def check(name, ok, detail=""):
            checks.append((name, bool(ok), detail))

        meta = _read_meta(root)
        if "quantize" not in meta.get("stages", {}):
            raise MissingArtifactError(
                f"artifacts in {artifacts} lack the 'quantize' stage; nothing to verify"
            )
        check("config_hash", meta.get("config_hash") == cfg.config_hash(),
              "artifacts match this config")

        blocks = tensors_to_model(read_tensors(_require_file(root, MODEL_FILE)))
        num_blocks = len(blocks)
        cal_tensors = read_tensors(_require_file(root, CALIBRATION_FILE))
        ckpt = read_tensors(_require_file(root, CHECKPOINT_FILE))

        # Containers round-trip bit-exactly.
        for filename in (MODEL_FILE, CALIBRATION_FILE, CHECKPOINT_FILE):
            src = root / filename
            tmp = root / (filename + ".roundtrip")
            try:
                write_tensors(tmp, read_tensors(src))
                check(
                    f"container_roundtrip:{filename}",
                    src.read_bytes() == tmp.read_bytes(),
                    "reserialization is byte-identical",
                )
            finally:
                if tmp.exists():
                    tmp.unlink()

        specs = layer_specs(num_blocks)
        raw_pairs = {}
        for spec in specs:
            bx = ckpt[f"ckpt/{spec.name}/bx"]
            bw = ckpt[f"ckpt/{spec.name}/bw"]
            raw_pairs[spec.name] = RawPair(bx=bx, bw=bw)
            err = float(np.max(np.abs(bx * bw - 1.0)))
            check(f"pair_inverse:{spec.name}", err <= 1e-9, f"max |bx*bw - 1| = {err:.3e}")
            eta = cal_tensors.get(f"cal/{spec.name}/eta")
            if eta is not None:
                err = abs(float(np.sum(eta)) - 1.0)
                check(
                    f"eta_normalized:{spec.name}",
                    err <= 1e-9 and np.all(eta >= 0.0),
                    f"|sum(eta) - 1| = {err:.3e}",
                )

        # Stored folds must match re-folding the base model with the stored pairs.
        refolded = {}
        for spec in specs:
            w, _ = blocks[spec.block_index].weights()[spec.kind]
            rf = (w.astype(np.float64) * raw_pairs[spec.name].bw[:, np.newaxis]).astype(w.dtype)
            refolded[spec.name] = rf
            stored = ckpt[f"ckpt/{spec.name}/w_folded"]
            err = float(np.max(np.abs(stored.astype(np.float64) - rf)))
            scale = float(max(np.max(np.abs(rf)), 1e-30))
            check(
                f"folded_weights_match:{spec.name}",
                err / scale <= 1e-6,
                f"max deviation from refold = {err:.3e}",
            )
        refolded_adaln = []
        for i, blk in enumerate(blocks):
            ads = []
            for j, ad in ((1, blk.adaln1), (2, blk.adaln2)):
                pair_name = layer_name(i, "qkv" if j == 1 else "fc1", num_blocks)
                bx = raw_pairs[pair_name].bx
                folded = AdaLNParams(
                    w_gamma=(ad.w_gamma.astype(np.float64) * bx).astype(ad.w_gamma.dtype),
                    w_beta=(ad.w_beta.astype(np.float64) * bx).astype(ad.w_beta.dtype),
                    b_gamma=(ad.b_gamma.astype(np.float64) * bx).astype(ad.b_gamma.dtype),
                    b_beta=(ad.b_beta.astype(np.float64) * bx).astype(ad.b_beta.dtype),
                )
                ads.append(folded)
                for field_name in _ADALN_FIELDS:
                    stored = ckpt[f"ckpt/block{i}/adaln{j}/{field_name}"]
                    ref = getattr(folded, field_name)
                    err = float(np.max(np.abs(stored.astype(np.float64) - ref.astype(np.float64))))
                    scale = float(max(np.max(np.abs(ref)), 1e-30))
                    if err / scale > 1e-6:
                        check(
                            f"folded_adaln_match:block{i}/adaln{j}/{field_name}",
                            False,
                            f"max deviation = {err:.3e}",
                        )
            refolded_adaln.append(tuple(ads))
        check("folded_adaln_match", all(ok for n, ok, _ in checks if n.startswith("folded_adaln")),
              "scale/shift folds match re-folding")

        # Mathematical equivalence: folded (unquantized) forward vs original.
        shadow = QuantizedModel(
            blocks=blocks,
            pairs=raw_pairs,
            folded_weights=refolded,
            folded_adaln=refolded_adaln,
            eval_weights=refolded,
            weight_params=None,
            act_params=None,
            act_params_raw={},
            proj_mode="explicit",
        )
        inputs = [(z, c) for _, z, c in eval_inputs(cfg, blocks[0].d_in)]
        equivalence = verify_equivalence(
            lambda zc: forward_stack(blocks, zc[0], zc[1])[0],
            lambda zc: folded_forward(shadow, zc[0], zc[1]),
            inputs,
            EQUIVALENCE_TOL,
        )
        check(
            "equivalence",
            equivalence.passed,
            f"max relative deviation {equivalence.max_relative_deviation:.3e} "
            f"(tol {EQUIVALENCE_TOL:g}, worst input {equivalence.worst_input})",
        )

        return VerifyResult(ok=all(ok for _, ok, _ in checks), checks=tuple(checks))
