"""Run configuration: method hyperparameters plus desk-scale step budgets.

Precedence when assembling a config: flag overrides > config file > defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .errors import ConfigError
from .fogsim import DatasetConfig, SceneConfig
from .nets import ArchConfig


@dataclass
class RunConfig:
    seed: int = 1

    # data (toy scenes)
    height: int = 64
    width: int = 64
    num_classes: int = 5
    n_train: int = 200
    n_test: int = 50
    n_real: int = 100
    n_real_test: int = 50
    synthetic_beta: list = field(default_factory=lambda: [0.02, 0.06])
    real_beta: list = field(default_factory=lambda: [0.08, 0.16])
    airlight: list = field(default_factory=lambda: [0.75, 0.95])
    real_airlight_amplitude: float = 0.05

    # architecture
    n_stages: int = 4
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    stem_channels: int = 16
    decoder_depth: str = "light"

    # clean-weather segmenter (frozen teacher)
    clean_steps: int = 1500
    clean_batch: int = 4
    clean_lr: float = 1e-2

    # defog pre-training (adaptive moments)
    pretrain_steps: int = 2000
    pretrain_batch: int = 6
    pretrain_lr: float = 5e-5
    pretrain_lr_end: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    pretrain_loss: str = "dct+sed"  # dct+sed | dct | sed | l1
    dfnet_init: str = "random"  # random | fsnetc

    # fog domain migration
    fdm_steps: int = 1000
    fdm_lr: float = 2e-5
    fdm_lr_end: float = 1e-5
    gamma: float = 0.01
    fdm_rounds: int = 1

    # fine-tuning (momentum SGD, poly decay)
    finetune_steps: int = 3000
    finetune_batch: int = 4
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-2
    momentum: float = 0.9
    poly_power: float = 0.5
    lambda_con: float = 1e-4
    kl_direction: str = "clean_ref"
    finetune_input: str = "fog"  # fog | defogged
    use_fog: bool = True
    use_cl: bool = True
    use_con: bool = True

    eval_batch: int = 25

    _CHOICES = {
        "decoder_depth": ("light", "heavy"),
        "pretrain_loss": ("dct+sed", "dct", "sed", "l1"),
        "dfnet_init": ("random", "fsnetc"),
        "kl_direction": ("clean_ref", "def_ref"),
        "finetune_input": ("fog", "defogged"),
    }

    def validate(self):
        for k, allowed in self._CHOICES.items():
            if getattr(self, k) not in allowed:
                raise ConfigError(f"{k}={getattr(self, k)!r} not in {allowed}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma={self.gamma} must lie in [0, 1]")
        if self.lambda_con < 0:
            raise ConfigError("lambda_con must be >= 0")
        for k in ("clean_steps", "pretrain_steps", "fdm_steps", "finetune_steps", "fdm_rounds"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        for k in ("clean_batch", "pretrain_batch", "finetune_batch", "eval_batch"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("clean_lr", "pretrain_lr", "pretrain_lr_end", "fdm_lr", "fdm_lr_end",
                  "lr_encoder", "lr_decoder"):
            if not getattr(self, k) > 0 or getattr(self, k) == float("inf"):
                raise ConfigError(f"{k} must be a finite positive number")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and 0 <= self.momentum < 1):
            raise ConfigError("optimizer betas/momentum must lie in [0, 1)")
        if not (self.use_fog or self.use_cl or self.use_con):
            raise ConfigError("at least one fine-tuning loss must be enabled")
        self.arch()  # validates architecture fields
        self.dataset().validate()
        return self

    def arch(self, **overrides) -> ArchConfig:
        kw = dict(n_stages=self.n_stages, stage_channels=tuple(self.stage_channels),
                  num_classes=self.num_classes, decoder_depth=self.decoder_depth,
                  stem_channels=self.stem_channels)
        kw.update(overrides)
        try:
            return ArchConfig(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def dataset(self) -> DatasetConfig:
        return DatasetConfig(
            scene=SceneConfig(height=self.height, width=self.width, num_classes=self.num_classes),
            n_train=self.n_train, n_test=self.n_test, n_real=self.n_real,
            n_real_test=self.n_real_test, seed=self.seed,
            synthetic_beta=tuple(self.synthetic_beta), real_beta=tuple(self.real_beta),
            airlight=tuple(self.airlight), real_airlight_amplitude=self.real_airlight_amplitude,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kw) -> "RunConfig":
        return from_dict({**self.to_dict(), **kw})

    def digest(self, keys=None) -> str:
        import hashlib
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, value):
    default = getattr(RunConfig(), name)
    if isinstance(value, str) and isinstance(default, float) and not isinstance(default, bool):
        # YAML 1.1 reads "1e30" as a string; plain float() does not
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for {name}: {value!r}") from e
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} expects a list, got {value!r}")
        value = list(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name} expects a string, got {value!r}")
    return value


def from_dict(d: Dict[str, Any]) -> RunConfig:
    unknown = sorted(set(d) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in d.items()}).validate()


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    d: Dict[str, Any] = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        d.update(loaded)
    d.update(overrides or {})
    return from_dict(d)
