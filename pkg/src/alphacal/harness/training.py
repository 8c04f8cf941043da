"""Minibatch training of a variational regression network."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from .. import losses, metrics
from ..bnn import BnnModel, mc_predict
from ..ndcore import autodiff as ad
from ..ndcore.optim import AdamState, adam_step
from ..ndcore.rng import Rng
from .config import ExperimentConfig
from .data import Dataset, format_float

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "total", "kl", "data", "alpha")


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; ``model`` holds the last good parameters."""

    def __init__(self, message: str, model: BnnModel, rows: list[dict]):
        super().__init__(message)
        self.model = model
        self.rows = rows


@dataclass
class TrainResult:
    model: BnnModel
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = math.inf


def build_model(cfg: ExperimentConfig, input_dim: int, output_dim: int, rng: Rng) -> BnnModel:
    return BnnModel.init(input_dim, list(cfg.hidden), output_dim, rng, prior_sigma=cfg.prior_sigma,
                         init_sigma=cfg.init_sigma, chol_cap=cfg.chol_cap)


def validation_nll(model: BnnModel, x, y, k: int, seed: int) -> float:
    return metrics.test_nll(mc_predict(model, x, k, Rng(seed).spawn("val")), y)


def train(cfg: ExperimentConfig, data: Dataset, alpha: float | None | str = "config",
          seed: int | None = None) -> TrainResult:
    """Train with the variational objective (``alpha=None``) or black-box alpha.

    Keeps the parameters with the best validation mixture NLL (checked once
    per epoch). ``alpha="config"`` uses ``cfg.train_alpha``.
    """
    alpha = cfg.alpha_value if alpha == "config" else alpha
    seed = cfg.seed if seed is None else seed
    root = Rng(seed).spawn("train", "vi" if alpha is None else float(alpha))
    model = build_model(cfg, data.x.shape[1], data.y.shape[1], root.spawn("init"))
    x_tr, y_tr = data.train
    x_val, y_val = data.val
    d = len(x_tr)
    state = AdamState(lr=cfg.learning_rate)
    params = model.param_dict()
    names = list(params)
    rows: list[dict] = []
    result = TrainResult(model.copy())
    step = 0
    for epoch in range(cfg.epochs):
        warm = 1.0 if cfg.kl_warmup_epochs == 0 else min(1.0, (epoch + 1) / cfg.kl_warmup_epochs)
        perm = root.spawn("epoch", epoch).permutation(d)
        noise = root.spawn("noise", epoch)
        for start in range(0, d, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            try:
                with ad.Tape() as tape:
                    watched = {k: tape.watch(v) for k, v in params.items()}
                    rep = losses.objective(model, x_tr[idx], y_tr[idx], alpha, cfg.k_train, noise,
                                           kl_weight=cfg.kl_weight * warm, dataset_size=d, params=watched)
                grads = dict(zip(names, ad.grad(rep.node, [watched[k] for k in names])))
                params = adam_step(state, params, grads)
            except FloatingPointError as exc:
                last_good = model.with_params(params)
                raise TrainingDiverged(f"training diverged at step {step}: {exc}", last_good, rows) from exc
            rows.append(rep.row(step))
            step += 1
        current = model.with_params(params)
        val = validation_nll(current, x_val, y_val, cfg.k_val, seed)
        log.debug("epoch %d alpha %s val nll %.4f", epoch, alpha, val)
        if val < result.best_val_nll:
            result.model, result.best_epoch, result.best_val_nll = current, epoch, val
    result.rows = rows
    result.model.meta.update({
        "train_alpha": "vi" if alpha is None else float(alpha),
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_val_nll": result.best_val_nll,
    })
    return result


def write_loss_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [format_float(r[c]) for c in LOSS_COLUMNS[1:]])


def read_loss_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            out.append({"step": int(r["step"]), **{c: float(r[c]) for c in LOSS_COLUMNS[1:]}})
    return out
