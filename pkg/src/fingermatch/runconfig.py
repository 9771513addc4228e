"""Flat key=value run configuration with typed keys and CLI overrides.

Config files hold one `key = value` per line; `#` starts a comment. Unknown
keys are rejected by name. Precedence: CLI override > config file >
FINGERMATCH_SEED environment variable (seed only) > built-in default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .encoder import EncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .msloss import LossConfig
from .trainer import TrainConfig

SEED_ENV_VAR = "FINGERMATCH_SEED"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v.strip()) for v in raw.split(","))


@dataclass
class RunConfig:
    """Every tunable of the pipeline as one flat namespace."""

    stage: int = 1
    seed: int = 0
    epochs: int = 200
    base_lr: float = 3e-3
    lr_milestones: tuple = None  # None -> derived at 60% and 85% of epochs
    lr_decay_factor: float = 0.3
    weight_decay: float = 1e-6
    grad_clip: float = 5.0
    ids_per_batch: int = 4
    samples_per_id: int = 2
    freeze_encoder: bool = True
    fusion_weight: float = 1.0
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    layers: int = 2
    heads: int = 4
    mlp_hidden: int = 128
    embed_dim: int = 64
    fusion_blocks: int = 1
    alpha_pos: float = 2.0
    alpha_neg: float = 40.0
    tau: float = 0.5
    margin: float = 0.7

    def milestones(self) -> tuple:
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        derived = {int(self.epochs * 0.6), int(self.epochs * 0.85)}
        return tuple(sorted(m for m in derived if 0 < m < self.epochs))

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            width=self.width,
            layers=self.layers,
            heads=self.heads,
            mlp_hidden=self.mlp_hidden,
            embed_dim=self.embed_dim,
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            width=self.width,
            heads=self.heads,
            blocks=self.fusion_blocks,
            mlp_hidden=self.mlp_hidden,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha_pos=self.alpha_pos,
            alpha_neg=self.alpha_neg,
            tau=self.tau,
            margin=self.margin,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stage=self.stage,
            base_lr=self.base_lr,
            lr_milestones=self.milestones(),
            lr_decay_factor=self.lr_decay_factor,
            epochs=self.epochs,
            ids_per_batch=self.ids_per_batch,
            samples_per_id=self.samples_per_id,
            loss=self.loss_config(),
            seed=self.seed,
            encoder=self.encoder_config(),
            fusion=self.fusion_config(),
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            freeze_encoder=self.freeze_encoder,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}

_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "tuple": _parse_int_list,
}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    type_name = str(_FIELD_TYPES[key]).replace("builtins.", "")
    return _PARSERS[type_name](raw)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """key -> typed value for every assignment in the text."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        try:
            values[key] = _parse_value(key, raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Assemble a RunConfig from defaults, env seed, file, and overrides."""
    values = {}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read(), source=str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, value) if isinstance(value, str) else value
    return RunConfig(**values)
