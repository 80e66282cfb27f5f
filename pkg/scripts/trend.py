"""Run the desk-scale method matrix and check the expected orderings.

    python scripts/trend.py [--config scripts/configs/table4.yaml] [--out runs/table4] [--parallel N]
"""
import argparse
import math
from pathlib import Path

from fcasim import cli
from fcasim.config import parse_config

HERE = Path(__file__).resolve().parent


def pooled(a, b):
    return math.sqrt((a["std"] ** 2 + b["std"] ** 2) / 2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "table4.yaml")
    ap.add_argument("--out", default=None)
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()
    cfg = parse_config(args.config)
    s = cli.run_config(cfg, Path(args.out or cfg.output_dir), args.parallel)
    print(cli.format_table(s))
    print()
    def gap(a, b, key):
        if a in s and b in s:
            x, y = s[a][key], s[b][key]
            print(f"{key} {a:13s} - {b:10s} {x['mean'] - y['mean']:+.4f}  pooled std {pooled(x, y):.4f}")

    gap("fca", "fedavg_bsm", "avg_bacc")
    gap("fedavg_bsm", "fedavg_ce", "avg_bacc")
    for m in ("fedavg_ce", "fedavg_focal", "fedavg_bsm", "fedprox", "fca"):
        gap(m, "local", "gen_bacc")

if __name__ == "__main__":
    main()
