"""Run configuration: dataclasses plus TOML loading.

Defaults follow the published PointLoRA / Point-MAE fine-tuning recipe where
one exists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .transformer import EncoderConfig

LORA_SITES = ("qkv", "proj", "fc1", "fc2")
PROMPT_SITES = ("qkv", "fc1", "fc2")
PEFT_METHODS = ("pointlora", "linear_probe", "full")


class ConfigError(ValueError):
    pass


@dataclass
class TokenizerConfig:
    num_groups: int = 128
    group_size: int = 32
    h1: int = 128
    h2: int = 256
    pos_hidden: int = 128


@dataclass
class MultiScaleConfig:
    scales: list = field(default_factory=lambda: [[128, 32], [64, 64]])
    selected: list = field(default_factory=lambda: [32, 8])

    def __post_init__(self):
        self.scales = [list(map(int, s)) for s in self.scales]
        self.selected = [int(n) for n in self.selected]
        if len(self.scales) != len(self.selected) or not self.scales:
            raise ConfigError("need one selected count per scale")
        for (g, k), n in zip(self.scales, self.selected):
            if g < 1 or k < 1 or not 0 <= n <= g:
                raise ConfigError(f"bad scale (g={g}, k={k}, selected={n})")

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def num_selected(self) -> int:
        return sum(self.selected)

    @property
    def num_total(self) -> int:
        return sum(g for g, _ in self.scales)


@dataclass
class PeftConfig:
    method: str = "pointlora"
    rank: int = 8
    scaling: float = 1.0
    lora_targets: list = field(default_factory=lambda: ["qkv"])
    # separate rank-r factors for the q, k and v slices of the fused projection
    qkv_split: bool = True
    prompt_dim: int = 32
    prompt_sites: list = field(default_factory=lambda: ["qkv", "fc1"])
    token_selection: bool = True
    mask_hidden: int | None = None
    inject_blocks: list | None = None
    multiscale: MultiScaleConfig = field(default_factory=MultiScaleConfig)
    pool_prompts: bool = True
    train_norms: bool = True
    train_cls: bool = True
    train_prompt_tokenizer: bool = False
    merged: bool = False

    def __post_init__(self):
        if isinstance(self.multiscale, dict):
            self.multiscale = MultiScaleConfig(**self.multiscale)
        if self.method not in PEFT_METHODS:
            raise ConfigError(f"unknown peft method {self.method!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        bad = set(self.lora_targets) - set(LORA_SITES)
        if bad:
            raise ConfigError(f"unknown LoRA targets {sorted(bad)}")
        if len(self.prompt_sites) > 2 or set(self.prompt_sites) - set(PROMPT_SITES):
            raise ConfigError(f"prompt sites must be up to two of {PROMPT_SITES}")
        if "fc1" in self.prompt_sites and "fc2" in self.prompt_sites:
            raise ConfigError("only one FFN prompt site is allowed")


@dataclass
class HeadConfig:
    hidden: int = 256
    dropout: float = 0.5


@dataclass
class ModelConfig:
    num_classes: int = 15
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    fps_seed_index: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")


@dataclass
class LossConfig:
    mask_weight: float = 0.004
    epsilon: float = 1e-6
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.mask_weight < 0 or self.epsilon <= 0 or not 0 <= self.label_smoothing < 1:
            raise ConfigError("invalid loss configuration")


@dataclass
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    epochs: int = 300
    warmup_epochs: int = 10
    batch_size: int = 32
    min_lr: float = 1e-6
    grad_clip: float | None = None

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup must be shorter than training")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class DataConfig:
    classes: list = field(default_factory=lambda: ["sphere", "box", "torus", "cylinder"])
    num_points: int = 1024
    per_class: int = 125
    noise: float = 0.01
    rotation: str = "z"
    seed: int = 0
    augment: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    backbone_seed: int = 0


def _build(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'} must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{path}.{name}".lstrip(".")) if sub else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "data"): DataConfig,
    (ModelConfig, "encoder"): EncoderConfig,
    (ModelConfig, "tokenizer"): TokenizerConfig,
    (ModelConfig, "head"): HeadConfig,
    (ModelConfig, "peft"): PeftConfig,
    (PeftConfig, "multiscale"): MultiScaleConfig,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def model_config_from_dict(values: dict) -> ModelConfig:
    return _build(ModelConfig, values, "model")


def run_config_from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return run_config_from_dict(values)


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
