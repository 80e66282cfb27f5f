"""Command line entry point: ``fcasim run|validate|summarize``.

Exit codes: 0 success, 2 configuration error, 3 non-finite loss abort,
4 partition failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fcasim.config import ConfigError, CsvSource, ExperimentConfig, emit_config, parse_config
from fcasim.datagen import Dataset, SchemaError, generate, load_csv, normalize
from fcasim.federation import DivergenceError, run_experiment
from fcasim.metrics import MetricsRecord
from fcasim.partition import Partition, PartitionError, dirichlet_partition

log = logging.getLogger("fcasim")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTITION = 0, 2, 3, 4
CSV_HEADER = ("round", "client_id", "split", "bACC", "bAUC")
CONFIG_NAME = "config.yaml"
SUMMARY_NAME = "summary.json"
_CSV_RE = re.compile(r"^metrics_(.+)_seed(\d+)\.csv$")
METRIC_KEYS = ("spec_bacc", "spec_bauc", "gen_bacc", "gen_bauc", "avg_bacc", "avg_bauc")


def csv_name(label: str, seed: int) -> str:
    return f"metrics_{label}_seed{seed}.csv"


def _fmt(x: float) -> str:
    # shortest repr round-trips exactly, so reruns compare bitwise
    return "nan" if math.isnan(x) else repr(float(x))


def record_rows(rec: MetricsRecord) -> list[tuple]:
    rows = [(rec.round, k, "spec", _fmt(a), _fmt(u))
            for k, (a, u) in enumerate(zip(rec.client_bacc, rec.client_bauc))]
    rows.append((rec.round, "ALL", "spec", _fmt(rec.spec_bacc), _fmt(rec.spec_bauc)))
    if rec.gen_client_bacc is not None:
        rows += [(rec.round, k, "gen", _fmt(a), _fmt(u))
                 for k, (a, u) in enumerate(zip(rec.gen_client_bacc, rec.gen_client_bauc))]
    rows.append((rec.round, "ALL", "gen", _fmt(rec.gen_bacc), _fmt(rec.gen_bauc)))
    return rows


def write_metrics_csv(path: Path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in records:
            w.writerows(record_rows(rec))


def read_final_scores(path: Path) -> dict[str, float]:
    """S/G/avg scores from the last evaluated round of one metrics CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    last = max(int(r["round"]) for r in rows)
    agg = {r["split"]: r for r in rows if int(r["round"]) == last and r["client_id"] == "ALL"}
    out = {"round": last}
    for split, prefix in (("spec", "spec"), ("gen", "gen")):
        out[f"{prefix}_bacc"] = float(agg[split]["bACC"])
        out[f"{prefix}_bauc"] = float(agg[split]["bAUC"])
    out["avg_bacc"] = (out["spec_bacc"] + out["gen_bacc"]) / 2
    out["avg_bauc"] = (out["spec_bauc"] + out["gen_bauc"]) / 2
    return out


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; a single value has std 0."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize_scores(per_label: dict[str, list[dict]]) -> dict:
    out = {}
    for label, runs in per_label.items():
        entry = {"n": len(runs), "seeds": [r["seed"] for r in runs]}
        for key in METRIC_KEYS:
            m, s = mean_std([r[key] for r in runs])
            entry[key] = {"mean": m, "std": s}
        out[label] = entry
    return out


def format_table(summary: dict) -> str:
    cols = ("S-bACC", "S-bAUC", "G-bACC", "G-bAUC", "Avg-bACC", "Avg-bAUC")
    width = max([len("method")] + [len(k) for k in summary]) + 2
    lines = ["method".ljust(width) + "".join(c.rjust(12) for c in cols)]
    for label, entry in summary.items():
        cells = [f"{100 * entry[k]['mean']:.1f}±{100 * entry[k]['std']:.1f}" for k in METRIC_KEYS]
        lines.append(label.ljust(width) + "".join(c.rjust(12) for c in cells))
    return "\n".join(lines)


# --- data preparation ---------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> Dataset:
    if isinstance(cfg.data, CsvSource):
        c = cfg.data
        return load_csv(c.path, c.feature_columns, c.label_column, c.num_classes)
    return generate(cfg.data)


def prepare(cfg: ExperimentConfig) -> tuple[Dataset, Partition]:
    raw = load_data(cfg)
    part = dirichlet_partition(raw.labels, cfg.partition.spec(raw.labels, raw.num_classes))
    return normalize(raw, np.concatenate(part.train)), part


def _run_cell(args) -> tuple[str, int, list[MetricsRecord]]:
    cfg, variant, seed, dataset, partition, ckpt_dir, ckpt_every = args
    plan = cfg.plan_for(variant, seed)
    sub = None if ckpt_dir is None else Path(ckpt_dir) / f"{variant.label}_seed{seed}"
    try:
        result = run_experiment(dataset, partition, plan, label=variant.label,
                                checkpoint_dir=sub, checkpoint_every=ckpt_every)
    except DivergenceError as exc:
        raise DivergenceError(f"{variant.label} seed={seed}: {exc}") from None
    except Exception as exc:
        raise RuntimeError(f"{variant.label} seed={seed}: {exc}") from exc
    return variant.label, seed, result.records


def run_config(cfg: ExperimentConfig, out_dir: Path, parallel: int = 1,
               checkpoint_every: int = 0) -> dict:
    """Run every (method variant, seed) cell and write the output directory."""
    dataset, partition = prepare(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(emit_config(cfg))
    ckpt_dir = out_dir / "checkpoints" if checkpoint_every else None
    cells = [(cfg, v, s, dataset, partition, ckpt_dir, checkpoint_every)
             for v in cfg.methods for s in cfg.seeds]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    for label, seed, records in results:
        write_metrics_csv(out_dir / csv_name(label, seed), records)
        log.info("%s seed=%d done", label, seed)
    return write_summary(out_dir, [v.label for v in cfg.methods])


def write_summary(out_dir: Path, order: Optional[Sequence[str]] = None) -> dict:
    """Recompute summary.json from the metrics CSVs in ``out_dir``."""
    per_label: dict[str, list[dict]] = {}
    for path in sorted(out_dir.glob("metrics_*_seed*.csv")):
        m = _CSV_RE.match(path.name)
        if not m:
            continue
        scores = read_final_scores(path)
        scores["seed"] = int(m.group(2))
        per_label.setdefault(m.group(1), []).append(scores)
    if not per_label:
        raise FileNotFoundError(f"{out_dir}: no metrics CSV files")
    for runs in per_label.values():
        runs.sort(key=lambda r: r["seed"])
    if order is None and (out_dir / CONFIG_NAME).exists():
        order = [v.label for v in parse_config(out_dir / CONFIG_NAME).methods]
    labels = [x for x in (order or []) if x in per_label] + sorted(set(per_label) - set(order or []))
    summary = summarize_scores({k: per_label[k] for k in labels})
    payload = {"methods": summary, "runs": {k: per_label[k] for k in labels}, "table": format_table(summary).splitlines()}
    (out_dir / SUMMARY_NAME).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")
    return summary


# --- argument handling ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcasim", description="Desk-scale federated classifier anchoring simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every method x seed cell of a config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    r.add_argument("--parallel", type=int, default=1, metavar="N")
    r.add_argument("--checkpoint-every", type=int, default=0, metavar="R")
    v = sub.add_parser("validate", help="parse and validate a config, print the normalized form")
    v.add_argument("config")
    s = sub.add_parser("summarize", help="rebuild summary.json from an output directory")
    s.add_argument("out_dir")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            sys.stdout.write(emit_config(parse_config(args.config)))
            return EXIT_OK
        if args.command == "summarize":
            out = Path(args.out_dir)
            print(format_table(write_summary(out)))
            return EXIT_OK
        cfg = parse_config(args.config)
        if args.parallel < 1 or args.checkpoint_every < 0:
            raise ConfigError("--parallel must be >= 1 and --checkpoint-every >= 0")
        summary = run_config(cfg, Path(args.out or cfg.output_dir), args.parallel, args.checkpoint_every)
        print(format_table(summary))
        return EXIT_OK
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PartitionError as exc:
        print(f"partition failed: {exc}", file=sys.stderr)
        return EXIT_PARTITION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
