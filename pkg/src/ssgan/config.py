"""Run configuration: hyperparameters, serialization, and dotted-path overrides.

A config file is a JSON object mirroring :class:`SsGANConfig` (nested keys
``weights`` and ``adam``), optionally extended with ``data_root`` and
``run_dir``. Unknown keys are rejected so typos fail loudly, and every run
directory embeds the resolved snapshot for provenance.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import ConfigError, LossWeights

# (beta1, beta2, disc_iters) settings exercised by the robustness sweep
ROBUSTNESS_ADAM_SETTINGS = ((0.0, 0.9, 1), (0.0, 0.9, 2), (0.5, 0.999, 1))
ALPHA_SWEEP_VALUES = (0.2, 0.5, 1.0)
GP_LAMBDA_SWEEP_VALUES = (1.0, 10.0)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.0002
    beta1: float = 0.0
    beta2: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class SsGANConfig:
    """Everything that determines a training run, including the seed."""

    variant: str = "ssgan"
    weights: LossWeights = field(default_factory=LossWeights)
    adam: AdamConfig = field(default_factory=AdamConfig)
    disc_iters: int = 2
    batch_size: int = 64
    total_steps: int = 20000
    seed: int = 1
    regularizer: str = "spectral_norm"
    dataset: str = "cifar10"
    num_classes: int | None = None
    # architecture (desk scale)
    image_size: int = 32
    channels: int = 3
    z_dim: int = 128
    gf_dim: int = 256
    df_dim: int = 128
    sbn_hidden: int = 32
    loss_type: str = "cross_entropy"
    # evaluation cadence
    eval_interval: int = 1000
    eval_samples: int = 5000
    eval_batch: int = 100
    checkpoint_interval: int = 5000
    sample_grid: int = 64
    log_interval: int = 100

    def __post_init__(self):
        if self.disc_iters < 1:
            raise ConfigError(f"disc_iters must be >= 1, got {self.disc_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.uses_rotation and self.batch_size % 4 != 0:
            raise ConfigError(
                f"variant {self.variant!r} needs batch_size divisible by 4, got {self.batch_size}"
            )

    @property
    def uses_rotation(self) -> bool:
        return self.variant in ("ssgan", "ssgan_sbn")


def config_to_dict(config: SsGANConfig) -> dict:
    return dataclasses.asdict(config)


def _build_dataclass(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, dict):
            sub = {"weights": LossWeights, "adam": AdamConfig}.get(name)
            if sub is None:
                raise ConfigError(f"config key {path}{name} does not take a nested object")
            value = _build_dataclass(sub, value, f"{path}{name}.")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> SsGANConfig:
    return _build_dataclass(SsGANConfig, dict(data), "")


def load_config_file(path) -> tuple[SsGANConfig, dict]:
    """Read a JSON config file; returns (config, extras) where extras holds
    the non-hyperparameter keys (data_root, run_dir)."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    extras = {k: raw.pop(k) for k in ("data_root", "run_dir") if k in raw}
    return config_from_dict(raw), extras


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def apply_overrides(config: SsGANConfig, overrides: list[str]) -> SsGANConfig:
    """Apply ``key=value`` / ``weights.alpha=0.5`` style overrides to a config."""
    data = config_to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key path: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key path: {key}")
        node[parts[-1]] = _coerce(value.strip())
    return config_from_dict(data)
