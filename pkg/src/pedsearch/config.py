"""Training configuration: desk-scale defaults, paper-scale preset, file IO.

Config files are plain ``key=value`` lines (``#`` comments allowed); CLI
flags override file values, and the VFE_SEED environment variable overrides
the seed from anywhere.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import EncoderConfig
from .errors import ConfigError

MIM_VARIANTS = ("text_guided", "text_free", "off")
CALIBRATION_MODES = ("kl", "id_loss", "triplet", "off")
SEED_ENV_VAR = "VFE_SEED"


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tau: float = 0.02
    eps: float = 1e-8
    mask_ratio: float = 0.5
    pair_count: int = 16              # calibration anchors sampled per step
    batch_size: int = 32
    lr: float = 3e-4
    epochs: int = 200
    mim_variant: str = "text_guided"
    calibration_mode: str = "kl"
    mim_heads: int = 4
    fusion_depth: int = 1
    mca_scale_by_head_dim: bool = False
    triplet_margin: float = 0.2
    loss_weights: dict = field(default_factory=dict)
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.pair_count > self.batch_size:
            raise ConfigError(
                f"pair count {self.pair_count} exceeds batch size {self.batch_size}"
            )
        if self.mim_variant not in MIM_VARIANTS:
            raise ConfigError(f"mim_variant must be one of {MIM_VARIANTS}")
        if self.calibration_mode not in CALIBRATION_MODES:
            raise ConfigError(f"calibration_mode must be one of {CALIBRATION_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must be in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def np_dtype(self):
        import numpy as np
        return np.float32 if self.dtype == "float32" else np.float64

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Minutes-on-a-CPU scale; geometry mirrors the full-scale setup."""
        return cls(**overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale hyperparameters (pretrained backbones not included)."""
        enc = EncoderConfig(d=768, layers=12, heads=12, patch=16,
                            image_h=384, image_w=128, text_len=77,
                            vocab_size=49408, d_out=512)
        base = dict(encoder=enc, batch_size=100, lr=1e-5, epochs=60,
                    pair_count=20, mim_heads=8, fusion_depth=4)
        base.update(overrides)
        return cls(**base)

    # -- serialisation --------------------------------------------------------

    _ENCODER_KEYS = frozenset(f.name for f in dataclasses.fields(EncoderConfig))

    def to_flat_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "encoder":
                out.update({k: getattr(self.encoder, k) for k in sorted(self._ENCODER_KEYS)})
            elif f.name == "loss_weights":
                out[f.name] = ",".join(f"{k}:{v}" for k, v in sorted(self.loss_weights.items()))
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        enc_kwargs = {}
        kwargs = {}
        for key, value in flat.items():
            if key in cls._ENCODER_KEYS:
                enc_kwargs[key] = value
            elif key == "loss_weights":
                if isinstance(value, str):
                    value = {k: float(v) for k, v in
                             (pair.split(":") for pair in value.split(",") if pair)}
                kwargs[key] = value
            else:
                kwargs[key] = value
        kwargs["encoder"] = EncoderConfig(**enc_kwargs) if enc_kwargs else EncoderConfig()
        return cls(**_coerce_types(cls, kwargs))

    def replace(self, **changes) -> "TrainConfig":
        flat = self.to_flat_dict()
        for key, value in changes.items():
            if key not in flat and key not in ("encoder", "loss_weights"):
                raise ConfigError(f"unknown config field {key!r}")
            flat[key] = value
        return TrainConfig.from_flat_dict(flat)


def _coerce_types(cls, kwargs: dict) -> dict:
    """Cast string values (from files/CLI) to the declared field types."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in kwargs.items():
        declared = types.get(key, "")
        if isinstance(value, str):
            if declared == "int":
                value = int(value)
            elif declared == "float":
                value = float(value)
            elif declared == "bool":
                value = value.lower() in ("1", "true", "yes", "on")
        out[key] = value
    return out


def load_config_file(path) -> dict:
    """Parse a key=value config file into a flat string dict."""
    flat = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (need key=value): {raw!r}")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def config_from_sources(file_path=None, overrides: dict | None = None) -> TrainConfig:
    """File values, then explicit overrides, then the VFE_SEED env var."""
    flat = TrainConfig().to_flat_dict()
    if file_path:
        flat.update(load_config_file(file_path))
    if overrides:
        flat.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        flat["seed"] = int(env_seed)
    # strings from a file need coercion for encoder fields too
    enc_types = {f.name: f.type for f in dataclasses.fields(EncoderConfig)}
    for key, value in list(flat.items()):
        if key in enc_types and isinstance(value, str):
            flat[key] = int(value)
    return TrainConfig.from_flat_dict(flat)
