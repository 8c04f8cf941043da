"""Experiment configuration (JSON, unknown keys rejected).

The defaults describe the standard miscalibrated desk-scale task: a KL weight
of 0.1 and a capped Cholesky diagonal make the trained network overconfident,
which gives the calibration methods something real to fix.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..calibration import METHODS, FitSettings

DEFAULT_ALPHA_GRID = [-2.0, -1.0, -0.5, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    # task and data
    task_id: str = "affine_sin"
    input_dim: int = 8
    output_dim: int = 3
    noise_scale: float = 0.3
    n_points: int = 10_000
    dataset: str | None = None
    # architecture
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    prior_sigma: float = 1.0
    init_sigma: float = 0.05
    chol_cap: float | None = 0.2
    # training
    train_alpha: float | str = "vi"
    k_train: int = 4
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 3e-3
    kl_weight: float = 0.1
    kl_warmup_epochs: int = 0
    k_val: int = 8
    # calibration and evaluation
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    alpha_grid: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    k_eval: int = 64
    ft_lr: float = 3e-2
    ft_steps: int = 1000
    ft_k: int = 16
    ft_patience: int = 1000
    ft_batch_size: int | None = 128
    ft_kl_weight: float = 0.01
    ft_lr_decay: float = 0.9
    tril_lr: float = 0.01
    tril_steps: int = 2000
    threshold_mode: str = "chi2"
    train_baselines: bool = True
    sweep_vi: bool = True
    workers: int = 1
    # paths
    checkpoint: str | None = None
    calibrator: str | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = ("input_dim", "output_dim", "n_points", "epochs", "batch_size", "k_train", "k_val",
                  "k_eval", "ft_k", "ft_patience", "tril_steps", "workers")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.ft_steps < 0 or self.kl_warmup_epochs < 0:
            raise ConfigError("ft_steps and kl_warmup_epochs must be non-negative")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        for name in ("prior_sigma", "init_sigma", "learning_rate", "ft_lr", "tril_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.kl_weight < 0 or self.ft_kl_weight < 0 or self.noise_scale < 0:
            raise ConfigError("kl_weight, ft_kl_weight and noise_scale must be non-negative")
        if not 0 <= self.ft_lr_decay < 1:
            raise ConfigError("ft_lr_decay must lie in [0, 1)")
        if self.chol_cap is not None and not self.chol_cap > 0:
            raise ConfigError("chol_cap must be positive")
        if isinstance(self.train_alpha, str):
            if self.train_alpha != "vi":
                raise ConfigError("train_alpha must be a number or 'vi'")
        elif self.train_alpha == 0:
            raise ConfigError("train_alpha 0 is the variational objective; write 'vi'")
        if any(a == 0 for a in self.alpha_grid):
            raise ConfigError("alpha_grid must exclude 0")
        if list(self.alpha_grid) != sorted(set(self.alpha_grid)):
            raise ConfigError("alpha_grid must be strictly increasing")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown calibration methods {unknown}")
        if self.threshold_mode not in ("chi2", "hotelling", "hotelling_over_d"):
            raise ConfigError(f"unknown threshold mode {self.threshold_mode!r}")

    @property
    def alpha_value(self) -> float | None:
        """Training alpha as a number, ``None`` for the variational objective."""
        return None if self.train_alpha == "vi" else float(self.train_alpha)

    def fit_settings(self) -> FitSettings:
        return FitSettings(lr=self.ft_lr, steps=self.ft_steps, k=self.ft_k, patience=self.ft_patience,
                           batch_size=self.ft_batch_size, tril_lr=self.tril_lr, tril_steps=self.tril_steps,
                           kl_weight=self.ft_kl_weight, lr_decay=self.ft_lr_decay)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
