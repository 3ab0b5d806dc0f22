"""Pipeline configuration: JSON schema, defaults, validation, hashing.

Configs are plain JSON with a fixed schema; unknown keys anywhere are a hard
error so typos cannot silently fall back to defaults. Every key has a
documented default, so ``{}`` is the default desk-scale experiment. The
config hash is the SHA-256 of the canonical (defaults-filled, sorted,
compact) JSON form, excluding the output section, which names a location
rather than an experiment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SqError
from .sim import SalienceProfile

VALID_BITS = {2, 3, 4, 5, 6, 7, 8, 32}
PASSTHROUGH_BITS = 32

# Seed-purpose counters: the rng for purpose k is seeded with
# SeedSequence([root_seed, k]).
SEED_MODEL, SEED_CALIBRATION, SEED_EVAL = 0, 1, 2

# Plateau drift: amplified conditioning at the noisy ends of the schedule,
# quiet in the middle; a 4x swing.
_DEFAULT_DRIFT = [2.0, 2.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 2.0, 2.0]

DEFAULTS = {
    "seed": 0,
    "model": {
        "container": None,
        "d_in": 64,
        "n_tokens": 16,
        "heads": 4,
        "mlp_ratio": 4,
        "blocks": 1,
        "weight_profile": {
            "salient_channels": [5, 21, 38],
            "magnitude_scale": [20.0, 30.0, 45.0],
        },
        "act_profiles": [
            {
                "salient_channels": [3, 11, 19, 29, 37, 47, 53, 58],
                "magnitude_scale": [25.0, 29.0, 33.0, 38.0, 43.0, 48.0, 54.0, 60.0],
                "temporal_drift": _DEFAULT_DRIFT,
            }
        ],
    },
    "calibration": {"timesteps": 10, "samples_per_t": 8, "stride": 1},
    "quant": {
        "weight_bits": 4,
        "act_bits": 8,
        "weight_granularity": "per_output_channel",
        "act_granularity": "per_tensor",
        "fitter": "minmax",
        "shrink_grid": None,
    },
    "balancing": {
        "eps": 1e-5,
        "ssc_enabled": True,
        "layers": {"qkv": True, "proj": True, "fc1": True},
        "projection2": "auto",
    },
    "output": {"artifacts": "artifacts"},
}


def _merge(defaults, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        sub_path = f"{path}.{key}" if path else key
        if key not in given:
            out[key] = json.loads(json.dumps(default))  # deep copy
        elif isinstance(default, dict) and default and key != "weight_profile":
            out[key] = _merge(default, given[key], sub_path)
        else:
            out[key] = given[key]
    return out


def _profile_dict(raw, path) -> dict:
    allowed = {"salient_channels", "magnitude_scale", "temporal_drift"}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path}: {sorted(unknown)}")
    return {
        "salient_channels": list(raw.get("salient_channels", [])),
        "magnitude_scale": raw.get("magnitude_scale", []),
        "temporal_drift": raw.get("temporal_drift"),
    }


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class PipelineConfig:
    """Validated, defaults-filled experiment configuration."""

    raw: dict = field(repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        cfg = _merge(DEFAULTS, data, "")
        model = cfg["model"]
        if model["weight_profile"] is not None:
            model["weight_profile"] = _profile_dict(model["weight_profile"], "model.weight_profile")
        _require(isinstance(model["act_profiles"], list) and model["act_profiles"],
                 "model.act_profiles must be a nonempty list")
        model["act_profiles"] = [
            _profile_dict(p, f"model.act_profiles[{i}]")
            for i, p in enumerate(model["act_profiles"])
        ]
        _require(isinstance(cfg["seed"], int), "seed must be an integer")
        for key in ("d_in", "n_tokens", "heads", "mlp_ratio", "blocks"):
            _require(isinstance(model[key], int) and model[key] >= 1,
                     f"model.{key} must be a positive integer")
        _require(model["d_in"] % model["heads"] == 0, "model.heads must divide model.d_in")

        cal = cfg["calibration"]
        for key in ("timesteps", "samples_per_t", "stride"):
            _require(isinstance(cal[key], int) and cal[key] >= 1,
                     f"calibration.{key} must be a positive integer")

        quant = cfg["quant"]
        for key in ("weight_bits", "act_bits"):
            _require(quant[key] in VALID_BITS,
                     f"quant.{key} must be one of {sorted(VALID_BITS)} (32 = pass-through)")
        for key in ("weight_granularity", "act_granularity"):
            _require(quant[key] in ("per_tensor", "per_output_channel"),
                     f"quant.{key} must be 'per_tensor' or 'per_output_channel'")
        _require(quant["fitter"] in ("minmax", "mse_search"),
                 "quant.fitter must be 'minmax' or 'mse_search'")
        if quant["shrink_grid"] is not None:
            _require(isinstance(quant["shrink_grid"], list) and quant["shrink_grid"],
                     "quant.shrink_grid must be a nonempty list or null")
            _require(all(isinstance(s, (int, float)) and 0 < s <= 1 for s in quant["shrink_grid"]),
                     "quant.shrink_grid entries must lie in (0, 1]")

        bal = cfg["balancing"]
        _require(isinstance(bal["eps"], (int, float)) and bal["eps"] > 0,
                 "balancing.eps must be positive")
        _require(isinstance(bal["ssc_enabled"], bool), "balancing.ssc_enabled must be a bool")
        _require(bal["projection2"] in ("auto", "absorb", "explicit"),
                 "balancing.projection2 must be 'auto', 'absorb' or 'explicit'")
        layers = bal["layers"]
        unknown = set(layers) - {"qkv", "proj", "fc1"}
        _require(not unknown, f"unknown config key(s) at balancing.layers: {sorted(unknown)}")
        for kind in ("qkv", "proj", "fc1"):
            layers.setdefault(kind, True)
            _require(isinstance(layers[kind], bool),
                     f"balancing.layers.{kind} must be a bool")

        _require(isinstance(cfg["output"]["artifacts"], str) and cfg["output"]["artifacts"],
                 "output.artifacts must be a nonempty path string")

        self = cls(raw=cfg)
        # Drift schedules must cover the full sampler schedule.
        for i, p in enumerate(model["act_profiles"]):
            drift = p["temporal_drift"]
            if drift is not None and len(drift) != self.schedule_length:
                raise ConfigError(
                    f"model.act_profiles[{i}].temporal_drift has {len(drift)} entries; "
                    f"the schedule needs timesteps*stride = {self.schedule_length}"
                )
        try:
            from .sim import as_profiles

            as_profiles(self.act_profiles)
            self.weight_profile
        except SqError as exc:
            raise ConfigError(f"invalid salience profile: {exc}") from exc
        return self

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    # -- convenience accessors ------------------------------------------------

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def schedule_length(self) -> int:
        return self.raw["calibration"]["timesteps"] * self.raw["calibration"]["stride"]

    @property
    def selected_timesteps(self) -> list:
        cal = self.raw["calibration"]
        return [t * cal["stride"] for t in range(cal["timesteps"])]

    @property
    def weight_profile(self) -> SalienceProfile | None:
        wp = self.raw["model"]["weight_profile"]
        if wp is None:
            return None
        return SalienceProfile(
            tuple(wp["salient_channels"]), tuple(np.atleast_1d(wp["magnitude_scale"])), None
        )

    @property
    def act_profiles(self) -> list:
        out = []
        for p in self.raw["model"]["act_profiles"]:
            drift = p["temporal_drift"]
            out.append(
                SalienceProfile(
                    tuple(p["salient_channels"]),
                    tuple(np.atleast_1d(p["magnitude_scale"])),
                    None if drift is None else tuple(drift),
                )
            )
        return out

    @property
    def calibration_profiles(self) -> list:
        """Act profiles restricted to the selected timesteps."""
        idx = self.selected_timesteps
        return [p.restrict(idx) for p in self.act_profiles]

    @property
    def weight_passthrough(self) -> bool:
        return self.raw["quant"]["weight_bits"] == PASSTHROUGH_BITS

    @property
    def act_passthrough(self) -> bool:
        return self.raw["quant"]["act_bits"] == PASSTHROUGH_BITS

    @property
    def passthrough(self) -> bool:
        return self.weight_passthrough and self.act_passthrough

    def seed_for(self, purpose: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, purpose])

    def canonical_dict(self) -> dict:
        out = json.loads(json.dumps(self.raw))
        out.pop("output")
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()
