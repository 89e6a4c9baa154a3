"""Command-line runner.

    fedhenn run <config> [key=value ...]
    fedhenn sweep <config> <key> <v1,v2,...> [key=value ...]

A relative ``out_dir`` is resolved against ``$FEDHENN_OUT_ROOT`` when set,
otherwise against the working directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import shutil
import sys
import tempfile
from pathlib import Path

from fedhenn import baselines, federation
from fedhenn.config import ExperimentConfig, parse_config, scalar_keys
from fedhenn.federation import MetricsRow, RunResult

OUT_ROOT_ENV = "FEDHENN_OUT_ROOT"
METRICS_HEADER = [f.name for f in dataclasses.fields(MetricsRow)]

RUNNERS = {
    "fedhenn_homo": federation.run_homogeneous,
    "fedhenn_hetero": federation.run_heterogeneous,
    "fedavg": baselines.run_fedavg,
    "fedprox": baselines.run_fedprox,
    "local_only": baselines.run_local_only,
}


def resolve_out_dir(out_dir: str) -> Path:
    path = Path(out_dir)
    if path.is_absolute():
        return path
    root = os.environ.get(OUT_ROOT_ENV)
    return (Path(root) if root else Path.cwd()) / path


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow([_fmt(getattr(row, k)) for k in METRICS_HEADER])
    return buf.getvalue()


def summary_text(config: ExperimentConfig, result: RunResult) -> str:
    last = max(r.round for r in result.metrics)
    lines = [f"mode = {config.mode}", f"seed = {config.seed}", f"rounds = {last}"]
    for split in ("train", "test"):
        lines.append(f"final_macro_{split}_accuracy = {_fmt(result.final_macro(split))}")
    return "\n".join(lines) + "\n"


def execute(config: ExperimentConfig) -> RunResult:
    return RUNNERS[config.mode](config)


def write_run(config: ExperimentConfig, out: Path) -> RunResult:
    """Run ``config`` and publish its three output files into ``out``.

    Files are staged in a sibling temp directory and moved into place only
    after the run succeeds, so a failed run leaves nothing behind.
    """
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        result = execute(config)
        (stage / "metrics.csv").write_text(metrics_csv(result.metrics), encoding="utf-8")
        (stage / "config.resolved").write_text(config.to_text(), encoding="utf-8")
        (stage / "summary.txt").write_text(summary_text(config, result), encoding="utf-8")
        out.mkdir(exist_ok=True)
        for name in ("metrics.csv", "config.resolved", "summary.txt"):
            os.replace(stage / name, out / name)
        return result
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _one_line(exc: BaseException) -> str:
    msg = str(exc).strip().splitlines()
    text = msg[0] if msg else ""
    return f"{type(exc).__name__}: {text}" if text else type(exc).__name__


def cmd_run(config_path, overrides=()) -> int:
    try:
        config = parse_config(config_path, overrides)
        out = resolve_out_dir(config.out_dir)
        write_run(config, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line diagnostic
        print(f"fedhenn run: error: {_one_line(exc)}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


def cmd_sweep(config_path, key: str, values, overrides=()) -> int:
    values = [v.strip() for v in values if v.strip()]
    if not values:
        print("fedhenn sweep: usage error: empty values list", file=sys.stderr)
        return 2
    if key not in scalar_keys() and key != "shrink":
        print(f"fedhenn sweep: usage error: {key!r} is not a scalar config key", file=sys.stderr)
        return 2
    try:
        base = parse_config(config_path, overrides)
    except Exception as exc:  # noqa: BLE001
        print(f"fedhenn sweep: error: {_one_line(exc)}", file=sys.stderr)
        return 1
    root = resolve_out_dir(base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows, failures = [], 0
    for value in values:
        cell = f"{key}={value}"
        out = root / cell
        try:
            config = base.with_overrides([cell]).replace(out_dir=str(out))
            result = write_run(config, out)
            rows.append([key, value, "ok", _fmt(result.final_macro("train")), _fmt(result.final_macro("test")), ""])
        except Exception as exc:  # noqa: BLE001
            failures += 1
            msg = _one_line(exc)
            print(f"fedhenn sweep: {cell} failed: {msg}", file=sys.stderr)
            rows.append([key, value, "failed", "", "", msg])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value", "status", "final_macro_train_accuracy", "final_macro_test_accuracy", "error"])
    writer.writerows(rows)
    (root / "sweep_summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {root} ({len(values) - failures}/{len(values)} runs ok)")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhenn", description="Federated training with representation alignment.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config", help="path to a config file")
    run.add_argument("overrides", nargs="*", metavar="key=value")

    sweep = sub.add_parser("sweep", help="run one experiment per value of a scalar key")
    sweep.add_argument("config", help="path to a config file")
    sweep.add_argument("key", help="scalar config key to vary")
    sweep.add_argument("values", help="comma-separated values")
    sweep.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.overrides)
    values = args.values.split(",")
    if args.key == "shrink":
        # shrink values are themselves pairs; use ';' between cells
        values = args.values.split(";")
    return cmd_sweep(args.config, args.key, values, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
