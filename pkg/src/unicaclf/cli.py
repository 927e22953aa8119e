"""Command-line entry point.

Exit codes:
  0  success
  2  usage error (unknown subcommand, bad flags)
  3  invalid config file
  4  missing input file
  5  invalid dataset, predictions or checkpoint contents
  6  numerical failure (non-finite loss, gradient check above tolerance)
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data_io import (DatasetError, SynthConfig, generate_synthetic, ground_truth,
                      load_dataset, load_predictions, save_dataset, save_predictions)
from .metrics import AR_COUNTS, AR_COUNTS_SHORT, EvalConfig, evaluate
from .trainer import (TrainingError, ablation_baseline, grad_check, gradcheck_fixture, infer,
                      load_checkpoint, train)
from .types import ModelConfig

log = logging.getLogger("unicaclf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_NUMERIC = 6


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _read_config(path, cls, overrides=None):
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(EXIT_MISSING, "missing_file", f"config not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, "config", f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise CliError(EXIT_CONFIG, "config", f"{p}: top level must be an object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return cls.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from exc


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _emit(args, text):
    if args.stdout:
        sys.stdout.write(text)


def cmd_synth(args):
    cfg = _read_config(args.config, SynthConfig, {"seed": args.seed})
    dataset = generate_synthetic(cfg)
    out = Path(args.out)
    manifest = save_dataset(dataset, out)
    _write_json(out / "synth_config.json", cfg.to_dict())
    log.info("wrote %d samples to %s", len(dataset), manifest)
    _emit(args, str(manifest) + "\n")


def _train_common(args, ablate):
    cfg = _read_config(args.config, ModelConfig, {"seed": args.seed, "epochs": args.epochs})
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = ablation_baseline if ablate else train
    ckpt = run(cfg, dataset, out)
    _write_json(out / "config.json", ckpt.config.to_dict())
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for h in ckpt.loss_history:
            w.writerow([h["epoch"], repr(h["mean_loss"])])
    log.info("trained %d epochs, final loss %s", ckpt.epoch,
             ckpt.loss_history[-1]["mean_loss"] if ckpt.loss_history else "n/a")
    _emit(args, str(out / "checkpoint.bin") + "\n")


def cmd_train(args):
    _train_common(args, ablate=False)


def cmd_ablate(args):
    _train_common(args, ablate=True)


def cmd_infer(args):
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    preds = infer(ckpt, dataset)
    save_predictions(preds, args.out)
    log.info("wrote predictions for %d videos to %s", len(preds), args.out)
    if args.stdout:
        sys.stdout.write(Path(args.out).read_text())


def report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "threshold_or_n", "value"])
    for metric, key, value in report.rows():
        w.writerow([metric, key, repr(float(value))])
    return buf.getvalue()


def cmd_eval(args):
    preds = load_predictions(args.pred)
    gts = ground_truth(load_dataset(args.data))
    counts = AR_COUNTS_SHORT if args.ar_set == "short" else AR_COUNTS
    try:
        report = evaluate(preds, gts, EvalConfig(ar_counts=counts,
                                                 per_video_recall=args.per_video_recall))
    except KeyError as exc:
        raise CliError(EXIT_DATA, "data", str(exc.args[0])) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    text = report_csv(report)
    (out / "metrics.csv").write_text(text)
    for metric, key, value in report.rows():
        log.info("%s@%s = %.4f", metric, key, value)
    _emit(args, text)


def cmd_gradcheck(args):
    cfg = _read_config(args.config, ModelConfig, {"seed": args.seed})
    sample, params = gradcheck_fixture(cfg, args.instants, seed=cfg.seed)
    report = grad_check(cfg, sample, args.step, args.tolerance, params=params,
                        max_coords=args.max_coords, seed=cfg.seed)
    result = {"max_rel_error": report.max_rel_error,
              "worst": [report.worst[0], list(report.worst[1])],
              "analytic": report.analytic, "numeric": report.numeric,
              "checked": report.checked, "tolerance": report.tolerance,
              "passed": report.passed}
    if args.out:
        _write_json(args.out, result)
    log.info("gradcheck: %d coordinates, max relative error %.3e (%s)", report.checked,
             report.max_rel_error, "pass" if report.passed else "FAIL")
    _emit(args, json.dumps(result, sort_keys=True) + "\n")
    if not report.passed:
        raise CliError(EXIT_NUMERIC, "gradcheck",
                       f"max relative error {report.max_rel_error:.3e} >= {report.tolerance}")


def build_parser():
    p = _Parser(prog="unicaclf", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging on stderr (repeatable)")
    p.add_argument("--stdout", action="store_true",
                   help="also write the primary data output to stdout")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic planted-anomaly dataset")
    s.add_argument("--config", help="SynthConfig JSON file")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train the full model"),
                                 ("ablate", cmd_ablate, "train the residual-conv baseline")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="ModelConfig JSON file")
        s.add_argument("--data", required=True, help="dataset manifest")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--epochs", type=int, help="override the epoch budget")
        s.set_defaults(func=func)

    s = sub.add_parser("infer", help="predict forged segments")
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--data", required=True, help="dataset manifest")
    s.add_argument("--out", required=True, help="predictions JSON file")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="AP@IoU / AR@N report")
    s.add_argument("--pred", required=True, help="predictions JSON file")
    s.add_argument("--data", required=True, help="dataset manifest with ground truth")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--ar-set", choices=("full", "short"), default="full",
                   help="AR proposal counts: full=100,50,30,20,10,5  short=50,20,10,5")
    s.add_argument("--per-video-recall", action="store_true",
                   help="average recall per video instead of over the pooled corpus")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    s.add_argument("--config", help="ModelConfig JSON file")
    s.add_argument("--seed", type=int, help="seed for the random sample and parameters")
    s.add_argument("--instants", type=int, default=8, help="sample length T (default 8)")
    s.add_argument("--step", type=float, default=1e-6, help="central-difference step")
    s.add_argument("--tolerance", type=float, default=1e-5, help="max relative error")
    s.add_argument("--max-coords", type=int, help="check a random subset of coordinates")
    s.add_argument("--out", help="optional JSON report path")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _setup_logging(verbosity):
    # default shows warnings only; -v adds progress, -vv adds per-epoch detail
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(level)
    log.propagate = False


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_logging(args.verbose)
        if args.command is None:
            raise CliError(EXIT_USAGE, "usage", "no subcommand given")
        args.func(args)
        return EXIT_OK
    except CliError as exc:
        err = exc
    except FileNotFoundError as exc:
        err = CliError(EXIT_MISSING, "missing_file", str(exc))
    except (DatasetError, ValueError) as exc:
        err = CliError(EXIT_DATA, "data", str(exc))
    except (TrainingError, FloatingPointError) as exc:
        err = CliError(EXIT_NUMERIC, "numeric", str(exc))
    message = " ".join(str(err).split())
    sys.stderr.write(f"error code={err.code} kind={err.kind} message={json.dumps(message)}\n")
    return err.code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
