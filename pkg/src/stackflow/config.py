"""Flat run configuration: defaults, overrides, validation, hashing and
ablation presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .conditioning import BlendConfig, ControlConfig
from .denoiser import DenoiserConfig
from .flow import TrainConfig
from .priors import PRIOR_KINDS, FixedZinbConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    # denoiser backbone
    "model.layers": 4,
    "model.hidden": 128,
    "model.heads": 4,
    "model.edge_dim": 128,
    "model.k": 8,
    "model.dropout": 0.2,
    "model.inducing": 16,
    "model.time_dim": 32,
    "model.pos_dim": 16,
    "model.rbf_bins": 16,
    "model.ffn_mult": 4,
    # flow training and inference
    "train.epochs": 100,
    "train.batch": 2,
    "train.lr": 5e-4,
    "train.clip": 1.0,
    "train.patience": 10,
    "infer.steps": 5,
    # start distribution
    "prior.kind": "learned-zinb",
    "prior.hidden": 64,
    "prior.epochs": 200,
    "prior.patience": 20,
    "prior.lr": 5e-3,
    "prior.batch_spots": 256,
    "prior.holdout": 0.1,
    "prior.fixed_total_count": 1.0,
    "prior.fixed_logits": 0.1,
    "prior.fixed_zi_logits": 0.0,
    "prior.empirical_k": 128,
    "prior.empirical_sigma": 0.05,
    # control branch
    "control.enabled": True,
    "control.grid": 64,
    "control.channels": 32,
    "control.token_dim": 64,
    "control.scale": 1.0,
    "control.t_warm": 0.2,
    "control.blocks": "all",
    # adjacent-section retrieval
    "adjacent.enabled": True,
    "adjacent.k": 8,
    "adjacent.train_reach": 2,
    "blend.tau": 1.0,
    "blend.beta": 0.5,
    "proj.rank": 32,
    # evaluation
    "split.kind": "even",
    "eval.hvg": 0,
    # synthetic generator
    "synth.Z": 8,
    "synth.spots": 200,
    "synth.G": 50,
    "synth.D": 32,
    "synth.R": 4,
    "synth.smoothness": 0.9,
    "synth.snr": 4.0,
    "synth.marker_fraction": 0.2,
    "synth.marker_fold": 8.0,
    "synth.base_log_mean": 2.0,
    "synth.base_log_sd": 0.6,
    "synth.region_log_sd": 1.0,
    "synth.theta_min": 8.0,
    "synth.theta_max": 20.0,
    "synth.pi_min": 0.01,
    "synth.pi_max": 0.05,
    "synth.jitter": 0.1,
    "synth.blob_scale": 0.35,
}

ABLATIONS: dict[str, dict[str, Any]] = {
    "vanilla": {"prior.kind": "fixed-zinb", "control.enabled": False, "adjacent.enabled": False, "model.inducing": 0},
    "prior": {"prior.kind": "learned-zinb", "control.enabled": False, "adjacent.enabled": False},
    "prior+control": {"prior.kind": "learned-zinb", "control.enabled": True, "adjacent.enabled": False},
    "full": {"prior.kind": "learned-zinb", "control.enabled": True, "adjacent.enabled": True},
}

_CHOICES = {
    "prior.kind": set(PRIOR_KINDS),
    "split.kind": {"even", "single"},
}


def _coerce(key: str, value: Any) -> Any:
    """Cast ``value`` to the type of the default for ``key``."""
    ref = DEFAULTS[key]
    if isinstance(ref, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
            return True
        if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(ref, int):
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if isinstance(value, bool) or f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if isinstance(ref, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if key == "control.blocks" and isinstance(value, (list, tuple)):
        return ",".join(str(int(v)) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        merged = dict(DEFAULTS)
        for k, v in self.values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        self.values = merged
        self.validate()

    # -- construction -----------------------------------------------------------

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "RunConfig":
        return cls(dict(doc))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a flat key/value object")
        return cls.from_mapping(doc)

    def with_overrides(self, pairs: Mapping[str, Any]) -> "RunConfig":
        out = dict(self.values)
        for k, v in pairs.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            out[k] = v
        return RunConfig(out)

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return self.with_overrides(ABLATIONS[name])

    @staticmethod
    def parse_set(items: list[str]) -> dict[str, str]:
        out = {}
        for item in items:
            key, sep, val = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            out[key.strip()] = val.strip()
        return out

    # -- access -----------------------------------------------------------------

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        for key, allowed in _CHOICES.items():
            if v[key] not in allowed:
                raise ConfigError(f"{key} must be one of {sorted(allowed)}, got {v[key]!r}")
        for key in ("model.layers", "model.hidden", "model.heads", "model.k", "train.epochs", "train.batch", "infer.steps", "proj.rank", "adjacent.k", "adjacent.train_reach"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["model.hidden"] % v["model.heads"]:
            raise ConfigError("model.hidden must be divisible by model.heads")
        if not 0.0 <= v["model.dropout"] < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if v["model.inducing"] < 0:
            raise ConfigError("model.inducing must be >= 0")
        self.blocks()

    def blocks(self) -> tuple[int, ...] | None:
        raw = str(self.values["control.blocks"]).strip()
        if raw in ("", "all"):
            return None
        try:
            out = tuple(sorted({int(b) for b in raw.split(",")}))
        except ValueError:
            raise ConfigError(f"control.blocks must be 'all' or comma-separated ints, got {raw!r}") from None
        if any(b < 0 or b >= self.values["model.layers"] for b in out):
            raise ConfigError("control.blocks index out of range")
        return out

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def dump(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"

    # -- typed views ------------------------------------------------------------

    def control(self) -> ControlConfig | None:
        v = self.values
        if not v["control.enabled"]:
            return None
        return ControlConfig(
            grid=v["control.grid"],
            channels=v["control.channels"],
            token_dim=v["control.token_dim"],
            scale=v["control.scale"],
            t_warm=v["control.t_warm"],
            blocks=self.blocks(),
        )

    def denoiser(self, genes: int, emb_dim: int) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(
            genes=genes,
            emb_dim=emb_dim,
            layers=v["model.layers"],
            hidden=v["model.hidden"],
            heads=v["model.heads"],
            edge_dim=v["model.edge_dim"],
            k=v["model.k"],
            dropout=v["model.dropout"],
            inducing=v["model.inducing"],
            time_dim=v["model.time_dim"],
            pos_dim=v["model.pos_dim"],
            rbf_bins=v["model.rbf_bins"],
            ffn_mult=v["model.ffn_mult"],
            control=self.control(),
            rank=min(v["proj.rank"], genes),
        )

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=v["train.epochs"], batch=v["train.batch"], lr=v["train.lr"], clip=v["train.clip"], patience=v["train.patience"])

    def blend(self) -> BlendConfig:
        return BlendConfig(tau=self.values["blend.tau"], beta=self.values["blend.beta"])

    def fixed_zinb(self) -> FixedZinbConfig:
        v = self.values
        return FixedZinbConfig(v["prior.fixed_total_count"], v["prior.fixed_logits"], v["prior.fixed_zi_logits"])

    def synth(self, seed: int) -> SynthConfig:
        v = self.values
        return SynthConfig(
            Z=v["synth.Z"],
            spots=v["synth.spots"],
            G=v["synth.G"],
            D=v["synth.D"],
            R=v["synth.R"],
            smoothness=v["synth.smoothness"],
            snr=v["synth.snr"],
            marker_fraction=v["synth.marker_fraction"],
            marker_fold=v["synth.marker_fold"],
            base_log_mean=v["synth.base_log_mean"],
            base_log_sd=v["synth.base_log_sd"],
            region_log_sd=v["synth.region_log_sd"],
            theta_range=(v["synth.theta_min"], v["synth.theta_max"]),
            pi_range=(v["synth.pi_min"], v["synth.pi_max"]),
            jitter=v["synth.jitter"],
            blob_scale=v["synth.blob_scale"],
            seed=seed,
        )
