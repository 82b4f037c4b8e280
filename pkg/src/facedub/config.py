"""Run configuration: dataclass, key=value file parsing, CLI overrides."""
from __future__ import annotations

from dataclasses import dataclass, fields

from .tensor import ContractViolation


@dataclass
class PipelineConfig:
    image_size: int = 64        # H = W of the face crop
    channels: int = 32          # feature channels C
    feature_dim: int = 128      # pooled feature width d
    embed_dim: int = 64         # contrastive projection width
    batch: int = 4
    lr: float = 1e-4
    tau: float = 0.07
    lambda_v: float = 1.0
    lambda_p: float = 2.0
    lambda_gan: float = 3.0
    lambda_r: float = 4.0
    lambda_con: float = 5.0
    no_alignment: bool = False
    no_supervision: bool = False
    no_fusion: bool = False
    seed: int = 0
    steps: int = 200
    samples: int = 16
    expert_steps: int = 500     # phase-1 cap for the sync-expert heads
    optimizer: str = "adam"

    def validate(self) -> "PipelineConfig":
        positives = ("image_size", "channels", "feature_dim", "embed_dim",
                     "batch", "lr", "tau", "steps", "samples", "expert_steps")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ContractViolation(f"config: {name} must be positive")
        for name in ("lambda_v", "lambda_p", "lambda_gan", "lambda_r", "lambda_con"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"config: {name} must be >= 0")
        if self.batch < 2:
            raise ContractViolation("config: batch must be >= 2 for contrastive terms")
        if self.image_size % 4:
            raise ContractViolation("config: image_size must be divisible by 4")
        if self.channels % 2:
            raise ContractViolation("config: channels must be even")
        if self.samples < self.batch:
            raise ContractViolation("config: samples must be >= batch")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"config: unknown optimizer {self.optimizer!r}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractViolation(f"config: bad boolean for {name}: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def load_config_file(path) -> dict:
    """Parse a line-oriented `key = value` file with `#` comments."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#")[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{line_no}: expected `key = value`")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ContractViolation(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = _parse_value(key, text)
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> PipelineConfig:
    config = PipelineConfig()
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ContractViolation(f"config: unknown key {key!r}")
            setattr(config, key, value)
    return config.validate()
