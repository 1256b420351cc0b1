"""Command line front end: ``matrain run`` and ``matrain compare``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np

from matrain.config import RunSpec, load_spec, parse_bool
from matrain.datasets import generate_dataset
from matrain.errors import CompatibilityError, LockError, MatrainError, NumericError
from matrain.modelzoo import build_network
from matrain.trainer import MetricRow, RunResult, epoch_histogram, train

log = logging.getLogger("matrain")

METRIC_COLUMNS = (
    "epoch",
    "module_layer",
    "module_slot",
    "lambda_max",
    "lambda_min",
    "eff_rank",
    "cond_number",
    "in_info",
    "train_loss",
    "val_loss",
    "weight_dist",
    "flops_fwd",
    "flops_bwd",
    "flops_ntk",
)

LOCK_NAME = ".lock"


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def metric_record(row: MetricRow) -> list[str]:
    layer, slot = (-1, -1) if row.module is None else (row.module.layer_index, row.module.slot_index)
    return [
        str(row.epoch),
        str(layer),
        str(slot),
        _num(row.lambda_max),
        _num(row.lambda_min),
        _num(row.effective_rank),
        _num(row.condition_number),
        _num(row.in_information),
        _num(row.train_loss),
        _num(row.val_loss),
        _num(row.weight_distance),
        _num(row.flops_forward),
        _num(row.flops_backward),
        _num(row.flops_ntk),
    ]


def write_metrics(path: Path, rows: Sequence[MetricRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow(metric_record(row))
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="")


def summarize(result: RunResult) -> dict:
    cfg = result.config
    hist = epoch_histogram(result)
    best = int(np.argmin(result.val_losses))
    return {
        "policy": cfg.policy_kind.value,
        "seed": cfg.seed,
        "epochs_run": result.epochs_run,
        "halted": result.halted,
        "stopped_early": result.stopped_early,
        "final_train_loss": result.final_train_loss,
        "final_val_loss": result.final_val_loss,
        "best_val_loss": result.val_losses[best],
        "best_val_epoch": best,
        "flops": {
            "forward": result.ledger.forward_total,
            "backward": result.ledger.backward_total,
            "backward_modular": result.ledger.backward_modular,
            "ntk_overhead": result.ledger.ntk_overhead,
            "total": result.ledger.total,
        },
        "epoch_histogram": {str(m): n for m, n in sorted(hist.items())},
    }


@contextmanager
def run_lock(out: Path):
    """Exclusive ownership of ``out`` for the duration of one run."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def execute(spec: RunSpec, out: Path) -> RunResult:
    cfg = spec.train_config()
    arch = spec.build_architecture()
    data = generate_dataset(spec.dataset_kind, spec.dataset, seed=cfg.seed)
    net = build_network(arch, cfg.seed)
    (out / "config.ini").write_text(spec.echo(), encoding="utf-8", newline="")
    result = train(net, data, cfg)
    write_metrics(out / "metrics.csv", result.rows)
    _write_json(out / "ledger.json", result.ledger.as_dict())
    _write_json(out / "summary.json", summarize(result))
    return result


def _error_record(out: Path, exc: MatrainError) -> None:
    record = {"error": exc.kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, NumericError):
        record["epoch"] = exc.epoch
        record["sample"] = exc.sample
        if exc.checkpoint is not None:
            np.save(out / "checkpoint.npy", exc.checkpoint)
            record["checkpoint"] = "checkpoint.npy"
    _write_json(out / "error.json", record)


def cmd_run(args) -> int:
    out = Path(args.out)
    try:
        with run_lock(out):
            try:
                spec = load_spec(args.spec).with_overrides(
                    **{
                        "train.seed": args.seed,
                        "train.policy": args.policy,
                        "train.epochs": args.epochs,
                        "policy.alpha": args.alpha,
                        "policy.beta": args.beta,
                        "policy.samples": args.samples,
                        "policy.warmup": args.warmup,
                        "policy.cadence": args.cadence,
                        "policy.sticky": None if args.sticky is None else parse_bool(args.sticky),
                    }
                )
                spec.validate()
                result = execute(spec, out)
            except MatrainError as exc:
                log.error("%s", exc)
                _error_record(out, exc)
                return 2
    except LockError as exc:
        log.error("%s", exc)
        return 3
    log.info("final val loss %.6g, backward FLOPs %d", result.final_val_loss, result.ledger.backward_total)
    return 0


# --- compare -------------------------------------------------------------------


def _read_run(path: Path) -> tuple[list[dict[str, str]], dict]:
    metrics = path / "metrics.csv"
    summary = path / "summary.json"
    if not metrics.is_file() or not summary.is_file():
        raise CompatibilityError(f"{path} is not a completed run directory")
    with metrics.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise CompatibilityError(f"{metrics} has columns {reader.fieldnames}")
        rows = list(reader)
    return rows, json.loads(summary.read_text(encoding="utf-8"))


def _global_series(rows):
    out = []
    for r in rows:
        if r["module_layer"] == "-1":
            total = int(r["flops_fwd"]) + int(r["flops_bwd"]) + int(r["flops_ntk"])
            out.append((int(r["epoch"]), total, float(r["train_loss"]), float(r["val_loss"])))
    return out


def compare_runs(run_dirs: Sequence[Path], out: Path) -> dict:
    if len(run_dirs) < 2:
        raise CompatibilityError("compare needs at least two runs")
    names = []
    for p in run_dirs:
        name = Path(p).name or str(p)
        while name in names:
            name += "_"
        names.append(name)
    runs = [_read_run(Path(p)) for p in run_dirs]
    series = [_global_series(rows) for rows, _ in runs]

    report_runs = []
    for name, (rows, summary), s in zip(names, runs, series):
        if not s:
            raise CompatibilityError(f"run {name} has no GLOBAL rows")
        best = min(range(len(s)), key=lambda i: (s[i][3], i))
        report_runs.append(
            {
                "name": name,
                "policy": summary.get("policy"),
                "final_val_loss": s[-1][3],
                "best_val_loss": s[best][3],
                "best_val_epoch": s[best][0],
                "flops_to_best_val": s[best][1],
                "total_flops": s[-1][1],
                "backward_flops": summary["flops"]["backward"],
            }
        )

    ref = {e: v for e, _, _, v in series[0]}
    differences = {}
    for name, s in zip(names[1:], series[1:]):
        differences[name] = [[e, v - ref[e]] for e, _, _, v in s if e in ref]

    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "epoch", "flops_total", "train_loss", "val_loss"])
    for name, s in zip(names, series):
        for e, f, tr, va in s:
            w.writerow([name, e, f, repr(tr), repr(va)])
    (out / "loss_vs_flops.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "epoch", "module_layer", "module_slot", "lambda_max", "in_info"])
    for name, (rows, _) in zip(names, runs):
        for r in rows:
            if r["module_layer"] != "-1":
                w.writerow([name, r["epoch"], r["module_layer"], r["module_slot"], r["lambda_max"], r["in_info"]])
    (out / "lambda_max.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "module", "epochs_trained"])
    for name, (_, summary) in zip(names, runs):
        for module, count in summary.get("epoch_histogram", {}).items():
            w.writerow([name, module, count])
    (out / "histogram.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")

    report = {
        "runs": report_runs,
        "reference": names[0],
        "val_loss_difference": differences,
        "epoch_histogram": {name: summary.get("epoch_histogram", {}) for name, (_, summary) in zip(names, runs)},
        "plotdata": ["loss_vs_flops.csv", "lambda_max.csv", "histogram.csv"],
    }
    _write_json(out / "report.json", report)
    return report


def cmd_compare(args) -> int:
    out = Path(args.out)
    try:
        compare_runs([Path(p) for p in args.runs], out)
    except MatrainError as exc:
        log.error("%s", exc)
        out.mkdir(parents=True, exist_ok=True)
        _error_record(out, exc)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration and write metrics")
    run.add_argument("--spec", required=True, help="INI run spec")
    run.add_argument("--out", required=True, help="output directory (owned exclusively by this run)")
    run.add_argument("--seed", type=int)
    run.add_argument("--policy", choices=["vanilla", "rand", "multirate", "mat"])
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--samples", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--warmup", type=int)
    run.add_argument("--cadence", type=int)
    run.add_argument("--sticky", choices=["on", "off"])
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="align completed runs into a report")
    cmp_.add_argument("runs", nargs="+", help="run directories")
    cmp_.add_argument("--out", required=True, help="report directory")
    cmp_.set_defaults(func=cmd_compare)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("MAT_LOG_LEVEL", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
