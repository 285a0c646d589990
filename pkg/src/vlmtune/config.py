"""Model architecture configuration and named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Declarative description of the three-component model.

    ``full`` preset matches the published accounting scale (counting only,
    forward is never run at that size); ``toy`` and ``micro`` are small
    enough to train and gradient-check on a laptop CPU.
    """

    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vit_layers: int = 2
    jtm_layers: int = 2
    dec_layers: int = 2
    image_size: int = 32
    patch_size: int = 8
    vocab_size: int = 260
    max_text_len: int = 256
    tie_lm_head: bool = True
    use_cls: bool = True
    attn_budget: int = 1024
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def full_config() -> ModelConfig:
    """Full-scale architecture used for parameter accounting."""
    return ModelConfig(hidden_dim=768, num_heads=12, ffn_dim=3072,
                       vit_layers=12, jtm_layers=12, dec_layers=12,
                       image_size=480, patch_size=16,
                       vocab_size=30522, max_text_len=512)


def toy_config(dtype: str = "float32") -> ModelConfig:
    """Small model that trains in seconds; byte-level vocabulary."""
    return ModelConfig(dtype=dtype)


def micro_config(dtype: str = "float64") -> ModelConfig:
    """Tiny model for exhaustive finite-difference gradient checks."""
    return ModelConfig(hidden_dim=16, num_heads=2, ffn_dim=32,
                       vit_layers=1, jtm_layers=1, dec_layers=1,
                       image_size=8, patch_size=4,
                       vocab_size=32, max_text_len=16, dtype=dtype)


PRESETS = {"full": full_config, "toy": toy_config, "micro": micro_config}


def config_from_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = ModelConfig.from_dict(d)
    return cfg
