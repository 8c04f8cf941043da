"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O or input-file parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import calibration
from ..bnn import load_checkpoint, save_checkpoint
from ..calibration import Calibrator
from ..ndcore.linalg import CholeskyError
from ..ndcore.rng import Rng
from .config import ConfigError, ExperimentConfig, load_config
from .data import format_float, write_dataset
from .pipeline import dataset_for, run_pipeline
from .report import report
from .sweep import CellResult, alpha_label, evaluate, write_curves
from .training import TrainingDiverged, train, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("alphacal")


class UsageError(Exception):
    pass


class InputError(Exception):
    """Unreadable or malformed input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _alpha_arg(text: str):
    if text == "vi":
        return "vi"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha must be a number or 'vi', got {text!r}") from None
    if value == 0:
        raise argparse.ArgumentTypeError("alpha 0 is the variational objective; write 'vi'")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="alphacal", description="Variational regression networks and post-hoc calibration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("generate-data", help="write a synthetic dataset CSV and its sidecar")
    common(sp, "dataset path (writes <out>.csv and <out>.meta.json)")

    sp = sub.add_parser("train", help="train a network and write model.json and loss.csv")
    common(sp, "output directory")
    sp.add_argument("--alpha", type=_alpha_arg, help="training alpha, or 'vi'")
    sp.add_argument("--dataset", help="dataset path (overrides config)")

    sp = sub.add_parser("calibrate", help="fit one calibration method on the validation split")
    common(sp, "calibrator JSON path")
    sp.add_argument("--method", required=True, choices=calibration.METHODS)
    sp.add_argument("--alpha", type=_alpha_arg, default="vi", help="calibration alpha, or 'vi'")
    sp.add_argument("--checkpoint", help="model checkpoint (overrides config)")
    sp.add_argument("--dataset", help="dataset path (overrides config)")

    sp = sub.add_parser("evaluate", help="test-split metrics for a model and optional calibrator")
    common(sp, "output directory (metrics.json, curve.csv)")
    sp.add_argument("--checkpoint", help="model checkpoint (overrides config)")
    sp.add_argument("--calibrator", help="calibrator JSON (overrides config)")
    sp.add_argument("--dataset", help="dataset path (overrides config)")

    sp = sub.add_parser("sweep-alpha", help="fit and evaluate every method at every alpha")
    common(sp, "output directory (results.csv, curves.csv)")
    sp.add_argument("--method", action="append", choices=calibration.METHODS,
                    help="restrict to this method (repeatable)")
    sp.add_argument("--alpha", type=_alpha_arg, action="append", help="restrict to this alpha (repeatable)")
    sp.add_argument("--checkpoint", help="model checkpoint (overrides config)")
    sp.add_argument("--dataset", help="dataset path (overrides config)")

    sp = sub.add_parser("report", help="reliability-diagram CSVs and SVGs from a sweep")
    common(sp, "output directory")
    sp.add_argument("results", nargs="?", help="sweep directory or curves.csv (default: config out_dir)")
    return p


def _config(args) -> ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for name in ("dataset", "checkpoint", "calibrator"):
        if getattr(args, name, None):
            changes[name] = getattr(args, name)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        return cfg.replace(**changes) if changes else cfg
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None


def _read(what: str, fn, *a):
    try:
        return fn(*a)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {what}: {exc}") from None


def _require(value, what: str):
    if not value:
        raise UsageError(f"{what} is required (flag or config)")
    return value


def cmd_generate(args, cfg: ExperimentConfig) -> None:
    out = Path(args.out or Path(cfg.out_dir) / "data")
    csv_path, meta_path = write_dataset(dataset_for(cfg.replace(dataset=None)), out)
    print(f"wrote {csv_path} and {meta_path}")


def cmd_train(args, cfg: ExperimentConfig) -> None:
    if args.alpha is not None:
        cfg = cfg.replace(train_alpha=args.alpha)
    out = Path(args.out or cfg.out_dir)
    data = _read("dataset", dataset_for, cfg)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(cfg, data)
    except TrainingDiverged as exc:
        save_checkpoint(exc.model, out / "model.json")
        write_loss_csv(exc.rows, out / "loss.csv")
        raise
    save_checkpoint(result.model, out / "model.json")
    write_loss_csv(result.rows, out / "loss.csv")
    print(f"best epoch {result.best_epoch}, validation NLL {format_float(result.best_val_nll)}")
    print(f"wrote {out / 'model.json'} and {out / 'loss.csv'}")


def cmd_calibrate(args, cfg: ExperimentConfig) -> None:
    model = _read("checkpoint", load_checkpoint, _require(cfg.checkpoint, "--checkpoint"))
    data = _read("dataset", dataset_for, cfg)
    alpha = None if args.alpha == "vi" else args.alpha
    x_val, y_val = data.val
    rng = Rng(cfg.seed).spawn("fit", args.method, alpha_label(alpha))
    cal = calibration.fit(args.method, model, x_val, y_val, alpha, cfg.fit_settings(), rng, k_eval=cfg.k_eval)
    out = Path(args.out or Path(cfg.out_dir) / f"calibrator_{args.method}_{alpha_label(alpha)}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(cal.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    model = _read("checkpoint", load_checkpoint, _require(cfg.checkpoint, "--checkpoint"))
    data = _read("dataset", dataset_for, cfg)
    cal = Calibrator("none")
    if cfg.calibrator:
        cal = _read("calibrator", lambda p: Calibrator.from_dict(json.loads(Path(p).read_text())), cfg.calibrator)
    x_te, y_te = data.test
    ev = evaluate(model, cal, x_te, y_te, cfg)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"method": cal.method, "alpha": alpha_label(cal.alpha), "area": ev.area,
               "test_nll": ev.test_nll, "r2": ev.r2, "epistemic": ev.epistemic}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cell = CellResult(cal.method, cal.alpha, curve=ev.curve)
    write_curves([cell], out / "curve.csv")
    print(json.dumps(summary, sort_keys=True))


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    if args.method:
        cfg = cfg.replace(methods=list(dict.fromkeys(args.method)))
    if args.alpha:
        numeric = sorted({a for a in args.alpha if a != "vi"})
        cfg = cfg.replace(alpha_grid=numeric, sweep_vi="vi" in args.alpha)
    out = Path(args.out or cfg.out_dir)
    if cfg.checkpoint:
        _read("checkpoint", load_checkpoint, cfg.checkpoint)
    if cfg.dataset:
        _read("dataset", dataset_for, cfg)
    results = run_pipeline(cfg, out)
    failed = sum(r.status != "ok" for r in results)
    print(f"{len(results)} cells, {failed} failed; wrote {out / 'results.csv'} and {out / 'curves.csv'}")


def cmd_report(args, cfg: ExperimentConfig) -> None:
    src = Path(args.results or cfg.out_dir)
    curves = src / "curves.csv" if src.is_dir() else src
    out = Path(args.out) if args.out else (src if src.is_dir() else src.parent)
    written = _read("curves", report, curves, out)
    print(f"wrote {len(written)} files to {out}")


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep-alpha": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"alphacal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"alphacal: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, CholeskyError) as exc:
        print(f"alphacal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"alphacal: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
