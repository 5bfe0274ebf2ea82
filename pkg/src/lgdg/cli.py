"""Command-line surface: data generation, training, preset runs, ablation
grids, and report emission.

Exit codes: 0 ok, 2 configuration error, 3 protocol violation, 4 numeric
divergence. LGDG_THREADS caps (config, seed) cell parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .harness import (
    GRID_PRESETS,
    NumericDivergenceError,
    ProtocolViolationError,
    emit_report,
    ensure_dataset,
    grid_report_text,
    load_records,
    run_ablation_grid,
    run_setting,
    save_records,
    train_run,
)
from .metrics import aggregate
from .presets import PRESET_NAMES, preset_runs
from .scenes import DatasetError


def _load_config(path: str) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_json(text)


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args.config) if args.config else None
    if cfg is None:
        from .presets import dg_core_base
        cfg = dg_core_base()
    for key in sorted(cfg.domains):
        ds = ensure_dataset(cfg, key, args.out)
        print(f"domain {key}: {len(ds.scenes)} frames, "
              f"split sizes {[len(v) for v in ds.split.values()]}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    source = ensure_dataset(cfg, cfg.source_domain, args.data_root)
    target = ensure_dataset(cfg, cfg.target_domain, args.data_root)
    record = train_run(cfg, args.seed, source, target)
    out = Path(args.out or "records_train.json")
    save_records([record], out)
    print(f"seed {record.seed}: val mAP {100 * record.val_map:.2f} "
          f"(epoch {record.best_epoch}), test mAP {100 * record.test_map:.2f} "
          f"[{record.wall_time_s:.1f}s] -> {out}")
    return 0


def _cmd_run(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.preset:
        seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
        runs = preset_runs(args.preset, seeds)
    elif args.config:
        runs = [("run", _load_config(args.config))]
    else:
        raise ConfigError("run needs --preset or --config")
    all_records = []
    for label, cfg in runs:
        records = run_setting(cfg, args.data_root)
        save_records(records, out_dir / f"records_{label}.json")
        agg = aggregate([r.test_map for r in records])
        print(f"{label:36s} {cfg.setting:22s} test mAP {agg.formatted()}")
        all_records.extend(records)
    emit_report(all_records, out_dir, "csv")
    emit_report(all_records, out_dir, "json")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config) if args.config else None
    if cfg is None:
        from .presets import dg_core_base
        cfg = dg_core_base()
    if args.grid in GRID_PRESETS:
        rows = GRID_PRESETS[args.grid]
        head = "cvs" if args.grid == "cvs-head" else "recon"
    else:
        spec = json.loads(Path(args.grid).read_text())
        rows = [tuple(r) for r in spec["rows"]]
        head = spec["head"]
    grid = run_ablation_grid(cfg, head, rows, args.data_root)
    print(grid_report_text(grid))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for row in grid for r in row.records]
    save_records(records, out_dir / f"records_ablate_{head}.json")
    (out_dir / f"ablate_{head}.txt").write_text(grid_report_text(grid) + "\n")
    emit_report(records, out_dir, "csv")
    return 0


def _cmd_report(args) -> int:
    records = []
    for path in sorted(Path(args.indir).glob("records*.json")):
        records.extend(load_records(path))
    if not records:
        raise ConfigError(f"no records*.json under {args.indir}")
    path = emit_report(records, args.out or args.indir, args.format)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgdg")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the two-domain datasets")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train one (config, seed) cell")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--data-root", default="data")
    t.add_argument("--out")
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("run", help="run a preset or a config over its seeds")
    r.add_argument("--preset", choices=PRESET_NAMES)
    r.add_argument("--config")
    r.add_argument("--seeds", help="comma-separated override")
    r.add_argument("--data-root", default="data")
    r.add_argument("--out", default="results")
    r.set_defaults(fn=_cmd_run)

    a = sub.add_parser("ablate", help="run a feature-category ablation grid")
    a.add_argument("--grid", required=True,
                   help="'cvs-head', 'recon', or a JSON grid file")
    a.add_argument("--config")
    a.add_argument("--data-root", default="data")
    a.add_argument("--out", default="results")
    a.set_defaults(fn=_cmd_ablate)

    rep = sub.add_parser("report", help="emit CSV/JSON reports from records")
    rep.add_argument("--in", dest="indir", required=True)
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    rep.add_argument("--out")
    rep.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ProtocolViolationError as e:
        print(f"protocol violation: {e}", file=sys.stderr)
        return 3
    except NumericDivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
