"""Configuration dataclasses and the flat key=value config-file format.

Files hold one `key = value` pair per line (UTF-8, '#' comments, blank lines
ignored). Unknown keys are rejected so experiment records cannot silently
drift. Every field below is a config key; command-line flags override file
values, which override these defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

from .errors import ConfigError, DataError

DEFAULT_SEED = 47


@dataclass
class ModelConfig:
    """Network architecture, prompt wiring, and feature geometry."""

    vocab_size: int = 0  # filled from the vocabulary at build time
    enc_layers: int = 4
    dec_layers: int = 4
    model_dim: int = 128
    ffn_dim: int = 256
    heads: int = 4
    dropout: float = 0.3
    max_len: int = 128
    tied_embeddings: bool = True
    tied_output: bool = False
    cross_attend_visual: bool = True
    visual_keys: bool = False
    # visual features
    feature_count: int = 50
    feature_dim: int = 64
    # prompt machinery
    use_prompts: bool = True
    prompt_channels: int = 8
    prompt_alpha: float = 0.1
    prompt_stages: int = 1
    coupling_mode: str = "linear"  # linear | conv1d
    coupling_enabled: bool = True
    vpg_global: bool = True
    vpg_local: bool = True
    independent_prompts: bool = False
    share_branch_value_proj: bool = False
    share_branch_weights: bool = True  # one translation trunk for both branches
    fc_bottleneck: int = 256

    def validate(self) -> None:
        if min(self.enc_layers, self.dec_layers, self.model_dim, self.ffn_dim,
               self.heads, self.max_len) < 1:
            raise ConfigError("model sizes must all be positive")
        if self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if self.prompt_alpha < 0:
            raise ConfigError(f"prompt_alpha must be >= 0, got {self.prompt_alpha}")
        if self.coupling_mode not in ("linear", "conv1d"):
            raise ConfigError(f"unknown coupling_mode {self.coupling_mode!r}")
        if self.prompt_channels % 2:
            raise ConfigError("prompt_channels must be even (split into halves)")


@dataclass
class DiffusionConfig:
    """Toy conditional diffusion over feature vectors."""

    diffusion_steps: int = 50
    guidance_scale: float = 7.5
    alpha_start: float = 0.9999
    alpha_end: float = 0.98
    condition_dim: int = 32
    predictor_hidden: int = 64

    def validate(self) -> None:
        if self.diffusion_steps < 1:
            raise ConfigError("diffusion_steps must be >= 1")
        for a in (self.alpha_start, self.alpha_end):
            if not 0.0 < a <= 1.0:
                raise ConfigError(f"retention coefficients must be in (0,1], got {a}")


@dataclass
class TrainConfig:
    """Optimization, loss weighting and data batching."""

    seed: int = DEFAULT_SEED
    epochs: int = 10
    batch_tokens: int = 2048
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup_steps: int = 2000
    lr_decay: str = "none"  # none | inverse_sqrt
    accum_steps: int = 4
    label_smoothing: float = 0.1
    mu: float = 1.0
    lam: float = 1.0
    consistency_mode: str = "kl"  # kl | js | cosine
    stop_grad_authentic: bool = False
    validate_every: int = 0  # steps; 0 disables periodic validation
    beam_size: int = 5
    bpe_merges: int = 10000

    def validate(self) -> None:
        if self.mu < 0 or self.lam < 0:
            raise ConfigError("loss weights mu and lambda must be >= 0")
        if self.consistency_mode not in ("kl", "js", "cosine"):
            raise ConfigError(f"unknown consistency_mode {self.consistency_mode!r}")
        if self.lr_decay not in ("none", "inverse_sqrt"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if self.accum_steps < 1 or self.batch_tokens < 1 or self.epochs < 0:
            raise ConfigError("accum_steps/batch_tokens/epochs out of range")


_SECTIONS = (ModelConfig, DiffusionConfig, TrainConfig)

# "lambda" is friendlier in config files than the attribute name "lam".
_KEY_ALIASES = {"lambda": "lam"}


def _field_index() -> dict:
    index = {}
    for cls in _SECTIONS:
        for f in fields(cls):
            index[f.name] = (cls, f)
    return index


def default_config() -> dict:
    """All keys with their built-in default values."""
    merged = {}
    for cls in _SECTIONS:
        merged.update(dataclasses.asdict(cls()))
    return merged


def _coerce(raw: str, target_type) -> Union[int, float, bool, str]:
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"expected {target_type.__name__}, got {raw!r}")


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines into typed values; unknown keys error."""
    index = _field_index()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in index:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(raw, _FIELD_TYPES[key])
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def build_configs(overrides: dict):
    """Materialize (ModelConfig, DiffusionConfig, TrainConfig) from flat keys."""
    index = _field_index()
    per_class: dict = {cls: {} for cls in _SECTIONS}
    for key, value in overrides.items():
        key = _KEY_ALIASES.get(key, key)
        if key not in index:
            raise ConfigError(f"unknown config key {key!r}")
        cls, _ = index[key]
        per_class[cls][key] = value
    model = ModelConfig(**per_class[ModelConfig])
    diffusion = DiffusionConfig(**per_class[DiffusionConfig])
    train = TrainConfig(**per_class[TrainConfig])
    model.validate()
    diffusion.validate()
    train.validate()
    return model, diffusion, train


def format_config(values: dict) -> str:
    lines = [f"{'lambda' if k == 'lam' else k} = {values[k]}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


# dataclass field annotations are strings under `from __future__ import
# annotations`; resolve the primitive type per field name once.
_FIELD_TYPES = {}
for _cls in _SECTIONS:
    for _f in fields(_cls):
        _FIELD_TYPES[_f.name] = type(getattr(_cls(), _f.name))
