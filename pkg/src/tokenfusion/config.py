"""Experiment configuration: flat INI sections, strictly validated.

Unknown sections or keys are errors; every value is type-checked and
range-checked before any allocation happens.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got '{raw}'")


def _floats_csv(raw: str, key: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(float(part) for part in raw.split(","))
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from None


@dataclass
class ExperimentConfig:
    # model
    topology: str = "homogeneous"
    modalities: int = 2
    layers: int = 4
    channels: int = 64
    heads: int = 4
    tokens: int = 64
    mlp_ratio: int = 4
    share_msa_mlp: bool = True
    share_pe: bool = True
    residuals: bool = True
    precision: str = "float64"
    num_query_tokens: int = 0
    point_layers: int = 3
    point_channels: int = 48
    point_heads: int = 4
    point_tokens: int = 64
    image_layers: int = 3
    image_channels: int = 64
    image_heads: int = 4
    patch_size: int = 8
    image_width: int = 64
    image_height: int = 64
    # fusion
    fusion_enabled: bool = True
    threshold: float = 2e-2
    bidirectional: bool = False
    mask_mode: str = "score"
    random_rate: float = 0.3
    # loss
    lambda_token: float = 1e-3
    lambda_channel: float = 0.0
    task: str = "mse"
    modality_weights: tuple = ()
    # optimizer
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    steps: int = 2000
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # data
    data_path: str = ""
    latent_channels: int = 4
    train_samples: int = 256
    val_samples: int = 64
    noise_sigma: float = 0.05
    num_classes: int = 4
    mix_weight: float = 2.0
    point_feature_channels: int = 4
    image_field_channels: int = 6
    out_of_view_fraction: float = 0.1
    # run
    seed: int = 0
    metrics_interval: int = 20
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.validate()

    # -- schema ------------------------------------------------------------

    _SCHEMA = {
        "model": {
            "topology": str, "modalities": int, "layers": int, "channels": int,
            "heads": int, "tokens": int, "mlp_ratio": int, "share_msa_mlp": bool,
            "share_pe": bool, "residuals": bool, "precision": str,
            "num_query_tokens": int, "point_layers": int, "point_channels": int,
            "point_heads": int, "point_tokens": int, "image_layers": int,
            "image_channels": int, "image_heads": int, "patch_size": int,
            "image_width": int, "image_height": int,
        },
        "fusion": {
            "enabled": bool, "threshold": float, "bidirectional": bool,
            "mask_mode": str, "random_rate": float,
        },
        "loss": {
            "lambda_token": float, "lambda_channel": float, "task": str,
            "modality_weights": tuple,
        },
        "optimizer": {
            "kind": str, "learning_rate": float, "steps": int, "batch_size": int,
            "beta1": float, "beta2": float, "epsilon": float,
        },
        "data": {
            "path": str, "latent_channels": int, "train_samples": int,
            "val_samples": int, "noise_sigma": float, "num_classes": int,
            "mix_weight": float, "point_feature_channels": int,
            "image_field_channels": int, "out_of_view_fraction": float,
        },
        "run": {
            "seed": int, "metrics_interval": int, "checkpoint_interval": int,
        },
    }

    _RENAMES = {("fusion", "enabled"): "fusion_enabled",
                ("optimizer", "kind"): "optimizer",
                ("data", "path"): "data_path"}

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
        values = {}
        for section in parser.sections():
            if section not in cls._SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            schema = cls._SCHEMA[section]
            for key, raw in parser.items(section):
                if key not in schema:
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                kind = schema[key]
                name = cls._RENAMES.get((section, key), key)
                try:
                    if kind is bool:
                        values[name] = _bool(raw, key)
                    elif kind is tuple:
                        values[name] = _floats_csv(raw, key)
                    elif kind is int:
                        values[name] = int(raw)
                    elif kind is float:
                        values[name] = float(raw)
                    else:
                        values[name] = raw.strip()
                except ValueError:
                    raise ConfigError(f"{key}: cannot parse '{raw}' as {kind.__name__}") from None
        return cls(**values)

    def validate(self):
        if self.topology not in ("homogeneous", "heterogeneous"):
            raise ConfigError(f"unknown topology '{self.topology}'")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got '{self.precision}'")
        if self.topology == "homogeneous":
            if not 1 <= self.modalities <= 4:
                raise ConfigError(f"modalities must be 1..4, got {self.modalities}")
            if self.channels % self.heads:
                raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
            g = math.isqrt(self.tokens)
            if g * g != self.tokens:
                raise ConfigError(f"tokens must form a square grid, got {self.tokens}")
        else:
            if self.point_channels % self.point_heads:
                raise ConfigError("point_channels not divisible by point_heads")
            if self.image_channels % self.image_heads:
                raise ConfigError("image_channels not divisible by image_heads")
            if self.image_width % self.patch_size or self.image_height % self.patch_size:
                raise ConfigError("image size must be divisible by the patch size")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.mask_mode not in ("score", "random"):
            raise ConfigError(f"unknown mask mode '{self.mask_mode}'")
        if not 0.0 <= self.random_rate <= 1.0:
            raise ConfigError("random_rate must lie in [0, 1]")
        if self.lambda_token < 0 or self.lambda_channel < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.task not in ("mse", "cross_entropy"):
            raise ConfigError(f"unknown task '{self.task}'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.learning_rate <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ConfigError("learning_rate, steps and batch_size must be positive")
        if self.metrics_interval < 1:
            raise ConfigError("metrics_interval must be positive")
        for v in self.modality_weights:
            if v < 0:
                raise ConfigError("modality weights must be nonnegative")

    # -- helpers -------------------------------------------------------------

    @property
    def grid(self) -> int:
        return math.isqrt(self.tokens)

    @property
    def image_tokens(self) -> int:
        return (self.image_width // self.patch_size) * (self.image_height // self.patch_size)

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = dict(data)
        if "modality_weights" in kwargs:
            kwargs["modality_weights"] = tuple(kwargs["modality_weights"])
        return cls(**kwargs)
