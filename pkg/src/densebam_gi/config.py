"""Experiment configuration: one JSON document, validated before any compute."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .tensor import ContractError
from .training import TrainConfig


class ConfigError(ContractError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class DecoderSection:
    cell: str = "gi_gru"
    hidden: int = 256
    embed: int = 128
    width: int = 128
    step_size: float = 1.0
    learnable_step: bool = False
    level2_aux: str = "level1"


@dataclass
class AttentionSection:
    attn_dim: int = 128
    cov_channels: int = 64
    kernel: int = 5


@dataclass
class TrainSection:
    lr: float = 1e-4
    momentum: float = 0.9
    lambda_l2: float = 0.01
    l2_scope: str = "weights"
    max_epochs: int = 300
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    batch_size: int = 16
    grad_clip: float | None = 100.0
    max_decode_len: int = 40
    eval_every: int = 1
    stop_at_train_exprate: float | None = None


@dataclass
class DataSection:
    source: str = "synthetic"
    count: int = 500
    grammar_depth: int = 3
    inkml_dir: str | None = None
    val_fraction: float = 0.1
    target_height: int = 64
    stroke_width: int = 2
    pad_multiple: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    attention: AttentionSection = field(default_factory=AttentionSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    # ------------------------------------------------------------ derived configs

    def decoder_config(self) -> DecoderConfig:
        d, a = self.decoder, self.attention
        return DecoderConfig(cell=d.cell, hidden=d.hidden, embed=d.embed, width=d.width, step_size=d.step_size,
                             learnable_step=d.learnable_step, level2_aux=d.level2_aux, attn_dim=a.attn_dim,
                             cov_channels=a.cov_channels, cov_kernel=a.kernel)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.train))

    def validate(self) -> ExperimentConfig:
        """Run every section's checks; raises ConfigError naming the section."""
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        checks = {"encoder": self.encoder.validate, "decoder": self.decoder_config,
                  "train": self.train_config}
        for key, check in checks.items():
            try:
                check()
            except ContractError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        data = self.data
        if data.source not in ("synthetic", "inkml"):
            raise ConfigError(f"data.source: must be 'synthetic' or 'inkml', got {data.source!r}")
        if data.source == "inkml" and not data.inkml_dir:
            raise ConfigError("data.inkml_dir: required when data.source is 'inkml'")
        if data.count < 1 or data.grammar_depth < 0:
            raise ConfigError("data.count must be >= 1 and data.grammar_depth >= 0")
        if not 0 <= data.val_fraction < 1:
            raise ConfigError("data.val_fraction: must lie in [0, 1)")
        if min(data.target_height, data.stroke_width, data.pad_multiple) < 1:
            raise ConfigError("data: target_height, stroke_width and pad_multiple must be positive")
        return self

    # ------------------------------------------------------------ (de)serialization

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        enc = out["encoder"]
        enc["layers_per_block"] = list(self.encoder.layers_per_block)
        enc["bam_after"] = sorted(self.encoder.bam_after)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        # omitted keys take the desk-scale defaults of a bare ExperimentConfig
        if not isinstance(raw, dict):
            raise ConfigError("config: expected an object")
        return _build(cls, _merge(cls().to_dict(), raw), "").validate()

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def with_overrides(self, assignments: list[str]) -> ExperimentConfig:
        """Apply ``section.key=value`` strings; values parse as JSON, falling back to plain strings."""
        raw = self.to_dict()
        for item in assignments:
            key, sep, text = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            *parents, leaf = key.strip().split(".")
            node = raw
            for part in parents:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"{key}: unknown section {part!r}")
                node = node[part]
            if leaf not in node or isinstance(node[leaf], dict):
                raise ConfigError(f"{key}: unknown key")
            try:
                node[leaf] = json.loads(text)
            except json.JSONDecodeError:
                node[leaf] = text
        return ExperimentConfig.from_dict(raw)


def canonical(text: str) -> str:
    """Canonical form of a config document: defaults filled, keys sorted."""
    return ExperimentConfig.loads(text).dumps()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        out[key] = _merge(base[key], value) if isinstance(base.get(key), dict) and isinstance(value, dict) else value
    return out


_SECTIONS = {"encoder": EncoderConfig, "decoder": DecoderSection, "attention": AttentionSection,
             "train": TrainSection, "data": DataSection}


def _build(kind, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(kind)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in raw.items():
        path = f"{prefix}{name}"
        if kind is ExperimentConfig and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, path + ".")
        else:
            kwargs[name] = _coerce(value, fields[name], path)
    try:
        return kind(**kwargs)
    except ContractError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def _coerce(value, f: dataclasses.Field, path: str):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{path}: may not be null")
    if isinstance(default, bool) or kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if isinstance(default, (tuple, frozenset)):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers")
        return type(default)(value)
    if kind.startswith("int"):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if kind.startswith("float"):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value
