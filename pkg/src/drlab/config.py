"""Run configuration: one JSON document, unknown keys rejected, named presets."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .backbone import BackboneConfig
from .datagen import StreamSpec
from .errors import ConfigurationError
from .ipa import AttentionMode, FusionMode
from .supervision import DasConfig, LossKind
from .tensor import OptimizerConfig

SEED_ENV = "DRL_SEED"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=True)

    method: str = Field("drl", pattern="^(drl|finetune)$")
    backbone: BackboneConfig = BackboneConfig()
    stream: StreamSpec = StreamSpec()
    fusion_mode: FusionMode = FusionMode.GATE_ADAPT
    attention_mode: AttentionMode = AttentionMode.R_ATT
    per_head_attention: bool = False
    loss: LossKind = LossKind.DAS
    das: DasConfig = DasConfig()
    alpha: float = Field(0.5, ge=0)
    gamma: float = Field(0.9, ge=0, le=1)
    r: int | None = Field(None, gt=0)
    transfer_hidden: int | None = Field(None, gt=0)
    tau: float = Field(0.1, gt=0)
    init_scale: float = Field(10.0, gt=0)
    cosface_margin: float = Field(0.35, ge=0)
    optimizer: OptimizerConfig = OptimizerConfig()
    pretrain: OptimizerConfig = OptimizerConfig(epochs=30)
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: str = "runs/default"

    @field_validator("r")
    @classmethod
    def _r_below_width(cls, v, info):
        backbone = info.data.get("backbone")
        if v is not None and backbone is not None and v >= backbone.embed_dim:
            raise ValueError("adapter bottleneck r must be smaller than embed_dim")
        return v

    @property
    def bottleneck(self) -> int:
        return self.r or min(48, self.backbone.embed_dim // 2)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)

    def experiment_fields(self) -> dict:
        """Everything that determines results; the output location is excluded."""
        return self.model_dump(mode="json", exclude={"out_dir"})

    def digest(self) -> bytes:
        canonical = json.dumps(self.experiment_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).digest()

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": seed})

    @property
    def stream_spec(self) -> StreamSpec:
        """The data stream is always generated from the run seed."""
        return self.stream.model_copy(update={"seed": self.seed, "image_side": self.backbone.image_side})


PRESETS: dict[str, dict] = {
    "drl-default": {"alpha": 0.5, "gamma": 0.9, "das": {"k": 1.0, "lambda_p": 3.0, "lambda_n": 1.0}},
    "drl-table-best": {"alpha": 0.5, "das": {"k": 1.0, "lambda_p": 1.0, "lambda_n": 2.0}},
}


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(
    path=None,
    preset: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Layer preset < config file < overrides < $DRL_SEED < explicit seed/out_dir."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    if path is not None:
        try:
            data = _merge(data, json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        data = _merge(data, overrides)
    try:
        config = RunConfig.model_validate(data)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    env_seed = os.environ.get(SEED_ENV)
    if seed is None and env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"${SEED_ENV} is not an integer: {env_seed!r}") from None
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed}")
        config = config.with_seed(seed)
    if out_dir is not None:
        config = config.model_copy(update={"out_dir": out_dir})
    return config


def load_config(text: str) -> RunConfig:
    try:
        return RunConfig.model_validate_json(text)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def config_schema() -> dict:
    return RunConfig.model_json_schema()
