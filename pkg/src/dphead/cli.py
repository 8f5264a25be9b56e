"""Command-line entry point.

Exit codes: 0 ok, 1 I/O failure, 2 usage or validation error, 3 numeric failure.
Only ``calibrate`` and ``report`` print JSON on stdout; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import accountant, data_io, trainer
from .grad_engine import LinearHead

log = logging.getLogger("dphead")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _probability(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _rate(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return v


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    group = p.add_argument_group("config overrides")
    for key in trainer.config_keys():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")


def _resolve_config(args) -> trainer.TrainConfig:
    overrides = {}
    if args.config:
        overrides.update(trainer.parse_key_values(Path(args.config).read_text(), args.config))
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            overrides[key[4:]] = value
    config = trainer.with_overrides(trainer.TrainConfig(), overrides)
    config.validate()
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dphead", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="noise multiplier for a target (epsilon, delta)")
    p.add_argument("--epsilon", type=_positive, required=True)
    p.add_argument("--delta", type=_probability, required=True)
    p.add_argument("--sampling-rate", type=_rate, required=True)
    p.add_argument("--steps", type=_positive_int, required=True)
    p.add_argument("--clip-norm", type=_positive, default=1.0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    p = sub.add_parser("report", help="achieved epsilon for a fixed noise multiplier")
    p.add_argument("--noise-multiplier", type=_positive, required=True)
    p.add_argument("--delta", type=_probability, required=True)
    p.add_argument("--sampling-rate", type=_rate, required=True)
    p.add_argument("--steps", type=_positive_int, required=True)
    p.add_argument("--clip-norm", type=_positive, default=1.0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    p = sub.add_parser("gen-synth", help="write a synthetic feature dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--d", type=_positive_int, required=True)
    p.add_argument("--k", type=_positive_int, required=True)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-seed", type=int, default=None,
                   help="draw a fresh sample around the same class means")
    p.add_argument("--format", choices=("cache", "csv"), default="cache")
    p.add_argument("--out", required=True)

    p = sub.add_parser("import", help="convert a CSV file to a feature cache")
    p.add_argument("--csv", required=True)
    p.add_argument("--label-column", type=int, default=-1)
    p.add_argument("--num-classes", type=_positive_int, default=None)
    p.add_argument("--header", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    p = sub.add_parser("train", help="finetune a linear head")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--wall-time", action="store_true",
                   help="record wall time in metrics (breaks byte-identical reruns)")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="train over a grid of config values")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1,
                   help="parallel runs (default: available cores)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="top-1 accuracy of a saved head")
    p.add_argument("--data", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    return parser


def save_head(head: LinearHead, path) -> None:
    Path(path).write_text(json.dumps({"W": head.W.tolist(), "b": head.b.tolist()}) + "\n")


def load_head(path) -> LinearHead:
    raw = json.loads(Path(path).read_text())
    return LinearHead(raw["W"], raw["b"])


def _load(path) -> data_io.FeatureDataset:
    if not Path(path).is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    return data_io.read_cache(path)


def cmd_calibrate(args):
    spec = accountant.PrivacySpec(args.epsilon, args.delta, args.sampling_rate, args.steps,
                                  args.clip_norm).resolve()
    print(accountant.privacy_report(spec).to_json())


def cmd_report(args):
    # the target is unknown here; report against an arbitrary positive placeholder
    spec = accountant.PrivacySpec(1.0, args.delta, args.sampling_rate, args.steps,
                                  args.clip_norm, args.noise_multiplier)
    report = accountant.privacy_report(spec)
    report.target_epsilon = None
    print(report.to_json())


def cmd_gen_synth(args):
    ds = data_io.gen_synthetic(args.n, args.d, args.k, args.separation, args.noise_std,
                               args.seed, args.sample_seed)
    if args.format == "csv":
        data_io.export_csv(ds, args.out)
    else:
        data_io.write_cache(ds, args.out)
    log.info("wrote n=%d d=%d k=%d to %s", ds.n, ds.d, ds.k, args.out)


def cmd_import(args):
    if not Path(args.csv).is_file():
        raise FileNotFoundError(f"csv file not found: {args.csv}")
    ds = data_io.import_csv(args.csv, args.label_column, args.num_classes, args.header)
    data_io.write_cache(ds, args.out)
    log.info("imported n=%d d=%d k=%d to %s", ds.n, ds.d, ds.k, args.out)


def _echo_config(config, out_dir: Path, extra: dict) -> None:
    text = trainer.format_config(config)
    header = "".join(f"# {k}={v}\n" for k, v in extra.items())
    (out_dir / "config.txt").write_text(header + text)
    sys.stderr.write("resolved config:\n" + text)


def cmd_train(args):
    config = _resolve_config(args)
    dataset = _load(args.data)
    eval_dataset = _load(args.eval_data) if args.eval_data else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir, {"data": args.data, "eval_data": args.eval_data})

    def progress(row):
        log.info("step %d lr=%.4g loss=%.6g acc=%s", row.step, row.lr, row.loss,
                 row.eval_accuracy)

    metrics_path = out_dir / "metrics.jsonl"
    try:
        result = trainer.train(config, dataset, eval_dataset, progress)
    except trainer.TrainingAborted as exc:
        metrics_path.write_text(trainer.metrics_jsonl(exc.metrics, args.wall_time))
        raise
    metrics_path.write_text(trainer.metrics_jsonl(result.metrics, args.wall_time))
    save_head(result.head, out_dir / "head.json")
    report_path = out_dir / "privacy.json"
    if result.report is not None:
        report_path.write_text(result.report.to_json() + "\n")
    elif report_path.exists():
        report_path.unlink()
    row = trainer.SweepRow(
        "run", 0, 0, {}, config.seed, "ok", result.final_accuracy,
        result.report.epsilon if result.report else None, result.sigma, result.steps,
    )
    (out_dir / "summary.csv").write_text(trainer.results_csv([row], []))
    log.info("final accuracy %s", result.final_accuracy)


def cmd_sweep(args):
    text = Path(args.grid).read_text()
    grid = trainer.SweepGrid.parse(text)
    config = _resolve_config(args)
    dataset = _load(args.data)
    eval_dataset = _load(args.eval_data) if args.eval_data else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir, {"data": args.data, "eval_data": args.eval_data,
                                   "grid": args.grid})
    result = trainer.run_sweep(grid, config, dataset, eval_dataset, args.workers)
    (out_dir / "results.csv").write_text(result.to_csv())
    summary = result.cell_summary()
    (out_dir / "cells.json").write_text(json.dumps(summary, indent=2) + "\n")
    failed = sum(r.status != "ok" for r in result.rows)
    log.info("%d runs, %d failed", len(result.rows), failed)
    if failed == len(result.rows):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args):
    dataset = _load(args.data)
    if not Path(args.head).is_file():
        raise FileNotFoundError(f"head file not found: {args.head}")
    head = load_head(args.head)
    if head.dim != dataset.d or head.num_classes != dataset.k:
        raise UsageError(
            f"head is {head.num_classes}x{head.dim}, data has k={dataset.k}, d={dataset.d}"
        )
    print(f"accuracy {trainer.evaluate(head, dataset):.6f}")


COMMANDS = {
    "calibrate": cmd_calibrate,
    "report": cmd_report,
    "gen-synth": cmd_gen_synth,
    "import": cmd_import,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except trainer.TrainingAborted as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (FileNotFoundError, data_io.FormatError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
