"""``rat`` command-line entry point.

Exit codes: 0 success, 1 bound violation, 2 configuration error, 3 runtime failure.
"""

import argparse
import csv
import json
import math
import os
import sys

from . import experiments as ex
from .config import ConfigError, resolve

EXIT_OK = 0
EXIT_BOUND = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

COMMANDS = ("illustrate-gaussian", "verify-kaczmarz", "train", "ablate")


def _clean(obj):
    """Replace non-finite floats by ``None`` so the JSON stays strict."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def write_csv(path, columns, rows):
    """CSV with a ``#schema=`` comment line, then a header row."""
    with open(path, "w", newline="") as fh:
        fh.write("#schema=" + ",".join(columns) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            values = row if isinstance(row, (list, tuple)) else [row[c] for c in columns]
            writer.writerow([repr(v) if isinstance(v, float) else v for v in values])


def read_csv(path):
    """Inverse of :func:`write_csv`; returns ``(columns, rows)`` with string cells."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#schema="):
            raise ValueError(f"{path} has no #schema= line")
        columns = first[len("#schema="):].strip().split(",")
        reader = csv.reader(fh)
        header = next(reader)
        if header != columns:
            raise ValueError(f"{path}: header does not match schema")
        return columns, [r for r in reader]


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _figures(enabled):
    if not enabled:
        return None
    from . import plotting
    return plotting


def cmd_illustrate(cfg, out, figures):
    seed = cfg.seed_list[0]
    rows, summary = ex.illustrate_gaussian(cfg, seed)
    write_csv(os.path.join(out, "gradient_field.csv"), ex.FIELD_COLUMNS, rows)
    write_json(os.path.join(out, "illustrate_summary.json"),
               {"command": "illustrate-gaussian", "seed": seed, "config": cfg.to_dict(), **summary})
    if figures:
        figures.gradient_field_figure(rows, os.path.join(out, "gradient_field.png"))
    return EXIT_OK


def cmd_verify(cfg, out, figures):
    seed = cfg.seed_list[0]
    report = ex.verify_kaczmarz(cfg, seed)
    write_json(os.path.join(out, "verify_report.json"),
               {"command": "verify-kaczmarz", "seed": seed, "config": cfg.to_dict(), **report})
    if figures:
        figures.mu_sweep_figure(report["lam_sweep"], os.path.join(out, "mu_vs_lambda.png"))
    return EXIT_OK if report["all_bounds_satisfied"] else EXIT_BOUND


def cmd_train(cfg, out, figures):
    records = []
    for seed in cfg.seed_list:
        rec = ex.train_seed(cfg, seed)
        records.append(rec)
        write_csv(os.path.join(out, f"run_seed{seed}.csv"), ex.RUN_COLUMNS, rec.rows)
        write_csv(os.path.join(out, f"timing_seed{seed}.csv"), ("update", "wall_time"),
                  list(enumerate(rec.wall_time)))
        if rec.failed:
            print(f"seed {seed} failed: {rec.error}", file=sys.stderr)
    summary = ex.summarize(records)
    write_json(os.path.join(out, "train_summary.json"),
               {"command": "train", "config": cfg.to_dict(), **summary,
                "errors": {str(r.seed): r.error for r in records if r.failed}})
    if figures:
        figures.learning_curve_figure(records, os.path.join(out, "learning_curve.png"))
    return EXIT_RUNTIME if summary["failed_seeds"] else EXIT_OK


def cmd_ablate(cfg, out, figures):
    rows = ex.ablate(cfg)
    write_csv(os.path.join(out, "ablation.csv"), ex.ABLATION_COLUMNS, rows)
    write_json(os.path.join(out, "ablation_summary.json"),
               {"command": "ablate", "config": cfg.to_dict(), "n_rows": len(rows),
                "failed": sum(bool(r["failed"]) for r in rows)})
    if figures:
        figures.ablation_figure(rows, os.path.join(out, "ablation.png"))
    return EXIT_RUNTIME if any(r["failed"] for r in rows) else EXIT_OK


HANDLERS = {
    "illustrate-gaussian": cmd_illustrate,
    "verify-kaczmarz": cmd_verify,
    "train": cmd_train,
    "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="rat", description="Randomized advantage transformation experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML or JSON file with flat keys")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides RAT_SEED and the config)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve(args.config, args.override, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(args.out, exist_ok=True)
        figures = _figures(args.figures or cfg.figures)
        return HANDLERS[args.command](cfg, args.out, figures)
    except OSError as exc:
        print(f"I/O error ({getattr(exc, 'filename', None) or args.out}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
