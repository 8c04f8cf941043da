"""Alpha sweep: fit every calibration method at every alpha and evaluate it.

One cell is a (method, alpha) pair. ``none`` is the uncalibrated model and
``trained`` is a network trained directly with that alpha. Every cell is
evaluated on the test split with the same Monte Carlo stream, so methods
that leave the means alone produce bit-identical means and epistemic traces.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import calibration, metrics
from ..bnn import BnnModel
from ..calibration import Calibrator
from ..ndcore.rng import Rng
from .config import ExperimentConfig
from .data import Dataset, format_float

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("method", "alpha", "status", "area", "test_nll", "r2", "epistemic", "s",
                  "warning", "mean_preserved")
CURVE_COLUMNS = ("method", "alpha", "nominal", "empirical")
METHOD_ORDER = ("none", "trained") + calibration.METHODS


def alpha_label(alpha: float | None) -> str:
    return "vi" if alpha is None else format_float(alpha)


def parse_alpha(text: str) -> float | None:
    return None if text == "vi" else float(text)


def cell_key(method: str, alpha: float | None) -> tuple:
    """Sort key: method order, then alpha with the variational objective at 0."""
    return METHOD_ORDER.index(method), 0.0 if alpha is None else alpha, alpha is not None


@dataclass
class CellResult:
    method: str
    alpha: float | None
    status: str = "ok"
    area: float = float("nan")
    test_nll: float = float("nan")
    r2: float = float("nan")
    epistemic: float = float("nan")
    s: float | None = None
    warning: str = ""
    mean_preserved: bool | None = None
    curve: metrics.CoverageCurve | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "method": self.method,
            "alpha": alpha_label(self.alpha),
            "status": self.status,
            "area": format_float(self.area),
            "test_nll": format_float(self.test_nll),
            "r2": format_float(self.r2),
            "epistemic": format_float(self.epistemic),
            "s": "" if self.s is None else format_float(self.s),
            "warning": self.warning,
            "mean_preserved": "" if self.mean_preserved is None else str(self.mean_preserved).lower(),
        }


@dataclass
class Evaluation:
    area: float
    test_nll: float
    r2: float
    epistemic: float
    curve: metrics.CoverageCurve
    mc_means: np.ndarray
    mean: np.ndarray


def evaluate(model: BnnModel, cal: Calibrator, x, y, cfg: ExperimentConfig) -> Evaluation:
    """Test-split metrics with the fixed evaluation stream of ``cfg.seed``."""
    mc = calibration.predict_mc(cal, model, x, cfg.k_eval, Rng(cfg.seed).spawn("eval"))
    curve = metrics.coverage_curve(metrics.moment_matched(mc), y, mode=cfg.threshold_mode)
    mean = calibration.predict_mean(cal, model, x).mean
    return Evaluation(
        area=metrics.area_score(curve),
        test_nll=metrics.test_nll(mc, y),
        r2=metrics.r_squared(mean, y),
        epistemic=metrics.epistemic_trace(mc),
        curve=curve,
        mc_means=mc.means,
        mean=mean,
    )


def _fill(res: CellResult, ev: Evaluation) -> CellResult:
    res.area, res.test_nll, res.r2, res.epistemic, res.curve = ev.area, ev.test_nll, ev.r2, ev.epistemic, ev.curve
    return res


def run_cell(method: str, alpha: float | None, cfg: ExperimentConfig, data: Dataset, model: BnnModel,
             baseline: Evaluation | None = None) -> CellResult:
    """Fit and evaluate one cell. Failures are recorded in the result, never raised."""
    res = CellResult(method, alpha)
    x_val, y_val = data.val
    x_te, y_te = data.test
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", calibration.CalibrationWarning)
            if method in ("none", "trained"):
                cal = Calibrator("none", alpha=alpha)
            else:
                rng = Rng(cfg.seed).spawn("fit", method, alpha_label(alpha))
                cal = calibration.fit(method, model, x_val, y_val, alpha, cfg.fit_settings(), rng, k_eval=cfg.k_eval)
            ev = evaluate(model, cal, x_te, y_te, cfg)
        _fill(res, ev)
        res.s = cal.s
        notes = [cal.warning] if cal.warning else []
        notes += [str(w.message) for w in caught if str(w.message) not in notes]
        res.warning = "; ".join(notes)
        if method in calibration.TEMPERATURE_ONLY and baseline is not None:
            res.mean_preserved = bool(
                np.array_equal(ev.mean, baseline.mean)
                and np.array_equal(ev.mc_means, baseline.mc_means)
                and ev.r2 == baseline.r2
            )
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        res.status = f"failed: {type(exc).__name__}: {exc}"
        log.warning("cell %s alpha %s failed: %s", method, alpha_label(alpha), exc)
    return res


def sweep_cells(cfg: ExperimentConfig, trained: dict | None = None) -> list[tuple[str, float | None]]:
    alphas: list[float | None] = ([None] if cfg.sweep_vi else []) + list(cfg.alpha_grid)
    cells = []
    for a in alphas:
        cells.append(("none", a))
        if trained is not None and a in trained:
            cells.append(("trained", a))
        cells.extend((m, a) for m in cfg.methods)
    return sorted(cells, key=lambda c: cell_key(*c))


def _cell_task(args):
    method, alpha, cfg, data, model, baseline = args
    return run_cell(method, alpha, cfg, data, model, baseline)


def sweep_alpha(cfg: ExperimentConfig, data: Dataset, model: BnnModel,
                trained: dict[float | None, BnnModel] | None = None) -> list[CellResult]:
    """Run every (method, alpha) cell; rows come back sorted by (method, alpha).

    ``trained`` maps an alpha (``None`` for the variational objective) to a
    network trained directly with it; those rows evaluate it uncalibrated.
    """
    x_te, y_te = data.test
    baseline = evaluate(model, Calibrator("none"), x_te, y_te, cfg)
    jobs = []
    for method, alpha in sweep_cells(cfg, trained):
        net = trained[alpha] if method == "trained" else model
        jobs.append((method, alpha, cfg, data, net, baseline))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_cell_task, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_cell_task(job))
            r = results[-1]
            log.info("%-10s alpha %-5s area %+.4f nll %.4f %s", r.method, alpha_label(r.alpha), r.area,
                     r.test_nll, r.status)
    return sorted(results, key=lambda r: cell_key(r.method, r.alpha))


def write_results(results: list[CellResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def write_curves(results: list[CellResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in results:
            if r.curve is None:
                continue
            for p, e in r.curve.pairs():
                w.writerow([r.method, alpha_label(r.alpha), format_float(p), format_float(e)])


def _parse_float(text: str) -> float:
    return float(text) if text != "" else float("nan")


def read_results(path) -> list[dict]:
    """Parse a results CSV; malformed rows raise ``ValueError`` with the line number."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(RESULT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RESULT_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(RESULT_COLUMNS)} fields, got {len(row)}")
            d = dict(zip(RESULT_COLUMNS, row))
            try:
                if d["method"] not in METHOD_ORDER:
                    raise ValueError(f"unknown method {d['method']!r}")
                rec = {
                    "method": d["method"],
                    "alpha": parse_alpha(d["alpha"]),
                    "status": d["status"],
                    **{c: _parse_float(d[c]) for c in ("area", "test_nll", "r2", "epistemic")},
                    "s": None if d["s"] == "" else float(d["s"]),
                    "warning": d["warning"],
                    "mean_preserved": {"": None, "true": True, "false": False}[d["mean_preserved"]],
                }
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append(rec)
    return out


def best_alpha(rows: list[dict], method: str, rel_tol: float = 0.01) -> float | None:
    """Alpha with the smallest |area| for ``method``.

    Cells within ``rel_tol`` of the minimum tie; the one closest to alpha = 1
    wins, which favours the Bayesian predictive objective on near-ties.
    """
    cand = [r for r in rows if r["method"] == method and r["status"] == "ok" and r["alpha"] is not None]
    if not cand:
        raise ValueError(f"no successful numeric-alpha rows for {method!r}")
    best = min(abs(r["area"]) for r in cand)
    close = [r for r in cand if abs(r["area"]) <= best * (1 + rel_tol) + 1e-15]
    return min(close, key=lambda r: (abs(r["alpha"] - 1.0), r["alpha"]))["alpha"]
