"""Command-line entry point: ``traffic-s2s <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 numerical failure.
The default output directory is ``$TRAFFIC_S2S_OUT`` or ``./out``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baselines import MODEL_CLASSES, PRESETS, build_model
from .data import (BIN_SECONDS, chronological_split, compute_stats, filter_active_antennas,
                   format_timestamp, ingest_csv, read_catalog, window_dataset,
                   write_catalog, write_csv)
from .errors import ContractError, DivergenceError, TrafficS2SError
from .gridmap import AntennaGrid, map_antennas_to_grid
from .metrics import evaluate, grid_to_antennas
from .pipeline import prepare_windows
from .synthetic import SyntheticConfig, synthesize_traffic
from .training import TrainConfig, load_model, save_model, stats_from_meta, stats_to_meta, train

log = logging.getLogger("traffic_s2s")
OUT_ENV = "TRAFFIC_S2S_OUT"
TRAINABLE = [k for k, cls in MODEL_CLASSES.items() if cls.trainable]


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- small helpers ------------------------------------------------------------------------

def sha256_files(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(hashlib.sha256(Path(p).read_bytes()).digest())
    return h.hexdigest()


def provenance(seed, inputs_hash) -> str:
    return f"# seed={seed}, inputs_sha256={inputs_hash}\n"


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def grid_dims(text):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 6x6, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return rows, cols


def out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


class Inputs:
    """Dataset, catalog and mapping loaded together, restricted to mapped antennas."""

    def __init__(self, args):
        for name in ("data", "catalog", "mapping"):
            if not Path(getattr(args, name)).is_file():
                raise ContractError(f"--{name} file not found: {getattr(args, name)}")
        self.paths = (args.data, args.catalog, args.mapping)
        self.hash = sha256_files(*self.paths)
        self.services = read_catalog(args.catalog)
        self.grid = AntennaGrid.from_text(Path(args.mapping).read_text())
        series = ingest_csv(args.data, self.services)
        self.series = series.select_antennas(self.grid.antenna_ids)


# -- subcommands ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    rows, cols = args.grid
    cfg = SyntheticConfig(n_services=args.services, n_antennas=args.antennas or rows * cols,
                          days=args.days, noise_scale=args.noise, top_share=args.top_share,
                          n_sporadic=args.sporadic, seed=args.seed)
    out = out_dir(args)
    series = synthesize_traffic(cfg)
    data_path, cat_path = out / "traffic.csv", out / "catalog.csv"
    write_csv(series, data_path)
    write_catalog(series.services, cat_path)
    manifest = {
        "seed": args.seed,
        "synthetic_config": dataclasses.asdict(cfg),
        "grid": [rows, cols],
        "files": {"traffic.csv": sha256_files(data_path), "catalog.csv": sha256_files(cat_path)},
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
    print(f"wrote {data_path} ({len(series)} bins, {len(series.antennas)} antennas, "
          f"{len(series.services)} services)")
    return 0


def cmd_map_grid(args) -> int:
    series = ingest_csv(args.data)
    series = filter_active_antennas(series, args.threshold)
    rows, cols = args.grid if args.grid else (None, None)
    grid = map_antennas_to_grid(series.antennas, rows, cols)
    out = out_dir(args)
    comments = [f"seed={args.seed}, inputs_sha256={sha256_files(args.data)}",
                f"active_threshold={args.threshold}"]
    path = write_text(out / "mapping.txt", grid.to_text(comments))
    print(f"wrote {path}: {len(grid.antenna_ids)} antennas on {grid.shape[0]}x{grid.shape[1]}, "
          f"{grid.n_masked} masked cells, mean displacement {grid.mean_displacement:.1f} m, "
          f"total {grid.total_displacement:.1f} m")
    return 0


def _train_settings(tcfg: TrainConfig) -> dict:
    # the output location is not provenance; leaving it out keeps reruns in other dirs identical
    settings = dataclasses.asdict(tcfg)
    settings.pop("checkpoint_path")
    return settings


def cmd_train(args) -> int:
    if args.model not in TRAINABLE:
        raise ContractError(f"model {args.model!r} is not trainable; choose from {', '.join(TRAINABLE)}")
    inp = Inputs(args)
    prepared = prepare_windows(inp.series, inp.grid, args.t_in, args.horizon, args.train_frac,
                               args.val_frac, args.train_stride, args.eval_stride)
    model = build_model(args.model, preset=args.preset, t_in=args.t_in, horizon=args.horizon,
                        grid_shape=tuple(inp.grid.shape), n_services=len(inp.services), seed=args.seed)
    out = out_dir(args)
    name = args.name or args.model
    ckpt = out / f"{name}.ckpt"
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, tf_prob=args.tf_prob,
                       seed=args.seed, patience=args.patience, checkpoint_path=str(ckpt))
    meta = {"seed": args.seed, "data_hash": inp.hash, "norm": stats_to_meta(prepared.stats),
            "train_frac": args.train_frac, "val_frac": args.val_frac, "preset": args.preset,
            "train_stride": args.train_stride, "train": _train_settings(tcfg)}
    result = train(model, prepared.train, tcfg, prepared.val, checkpoint_meta=meta, log=log.info)
    save_model(result.model, ckpt, meta)
    write_text(out / f"{name}_loss.csv", provenance(args.seed, inp.hash) + result.history_csv())
    snapshot = {"kind": args.model, "seed": args.seed, "inputs_sha256": inp.hash,
                "model": model.describe(), "train": _train_settings(tcfg),
                "best_epoch": result.best_epoch, "train_windows": len(prepared.train),
                "val_windows": len(prepared.val)}
    write_text(out / f"{name}_config.json", json.dumps(snapshot, indent=2, sort_keys=True, default=list) + "\n")
    print(f"wrote {ckpt} (best epoch {result.best_epoch}, "
          f"val loss {result.history[result.best_epoch - 1].val_loss:.6f})")
    return 0


def _load_for_eval(source: str, inp: Inputs, args):
    """(model, stats, train_frac, label) from a checkpoint path or 'persistence'."""
    if source == "persistence":
        model = build_model("persistence", t_in=args.t_in, horizon=args.horizon,
                            grid_shape=tuple(inp.grid.shape), n_services=len(inp.services))
        train_part, _ = chronological_split(inp.series, args.train_frac, args.t_in, args.horizon)
        return model, compute_stats(train_part.volumes), args.train_frac, "persistence", inp.hash
    model, meta = load_model(source)
    if meta.get("data_hash") != inp.hash:
        raise ContractError(f"{source}: checkpoint was trained on different data/catalog/mapping "
                            f"(hash {meta.get('data_hash', '?')[:12]} vs {inp.hash[:12]}); refusing")
    cfg = model.config
    if tuple(cfg.grid_shape) != tuple(inp.grid.shape) or cfg.n_services != len(inp.services):
        raise ContractError(f"{source}: model dimensions do not match the data")
    return model, stats_from_meta(meta["norm"]), meta["train_frac"], model.kind, meta["data_hash"]


def _test_windows(inp: Inputs, model, stats, train_frac, stride):
    t_in, horizon = model.config.t_in, model.config.horizon
    _, test_part = chronological_split(inp.series, train_frac, t_in, horizon)
    return window_dataset(test_part, inp.grid, stats, t_in, horizon, stride)


def _report(source, inp, args):
    model, stats, train_frac, label, _ = _load_for_eval(source, inp, args)
    windows = _test_windows(inp, model, stats, train_frac, args.eval_stride)
    report = evaluate(model, windows, stats, inp.grid, inp.services, data_hash=inp.hash)
    return label, report


def cmd_evaluate(args) -> int:
    inp = Inputs(args)
    label, report = _report(args.checkpoint, inp, args)
    name = args.name or label
    out = out_dir(args)
    head = provenance(args.seed, inp.hash)
    write_text(out / f"{name}_report.txt", head + report.to_text())
    write_text(out / f"{name}_metrics.csv", head + report.to_csv())
    steps = "".join(f"{k + 1},{float(v)!r}\n" for k, v in enumerate(report.mae_steps))
    write_text(out / f"{name}_mae_by_step.csv", head + "step,mae\n" + steps)
    svc = report.nmae_service
    cats = {s.id: s.category for s in inp.services}
    rows = "".join(f"{sid},{cats[sid]},{float(v)!r},{e}\n" for sid, v, e in zip(svc.labels, svc.values, svc.excluded))
    write_text(out / f"{name}_nmae_by_service.csv", head + "service_id,category,nmae,excluded\n" + rows)
    cat = report.nmae_category
    rows = "".join(f"{c},{float(v)!r},{e}\n" for c, v, e in zip(cat.labels, cat.values, cat.excluded))
    write_text(out / f"{name}_nmae_by_category.csv", head + "category,nmae,excluded\n" + rows)
    print(report.to_text(), end="")
    return 0


def cmd_compare(args) -> int:
    if len(args.checkpoints) < 2:
        raise UsageError("compare needs at least 2 checkpoints")
    inp = Inputs(args)
    results = []
    seen_hashes = set()
    for source in args.checkpoints:
        model, stats, train_frac, label, data_hash = _load_for_eval(source, inp, args)
        seen_hashes.add(data_hash)
        windows = _test_windows(inp, model, stats, train_frac, args.eval_stride)
        results.append((label, evaluate(model, windows, stats, inp.grid, inp.services, data_hash=inp.hash)))
    if len(seen_hashes) > 1:
        raise ContractError("checkpoints were trained on different data; refusing to compare")
    best = min(range(len(results)), key=lambda i: results[i][1].mae)
    lines = ["model,MAE,PSNR,SSIM,best"]
    for i, (label, rep) in enumerate(results):
        lines.append(f"{label},{float(rep.mae)!r},{float(rep.psnr)!r},{float(rep.ssim)!r},{int(i == best)}")
    table = "\n".join(lines) + "\n"
    out = out_dir(args)
    write_text(out / "compare.csv", provenance(args.seed, inp.hash) + table)
    print(table, end="")
    return 0


def cmd_predict(args) -> int:
    inp = Inputs(args)
    model, meta = load_model(args.checkpoint)
    if meta.get("data_hash") != inp.hash and not args.input:
        raise ContractError("checkpoint was trained on different data/catalog/mapping; refusing")
    stats = stats_from_meta(meta["norm"])
    source = inp.series
    if args.input:
        source = ingest_csv(args.input, inp.services).select_antennas(inp.grid.antenna_ids)
    t_in, horizon = model.config.t_in, model.config.horizon
    if len(source) < t_in:
        raise ContractError(f"need {t_in} bins of history, input has {len(source)}")
    recent = source.time_slice(len(source) - t_in, len(source))
    window = inp.grid.scatter(stats.normalize(recent.volumes, axis=1), recent.antenna_ids)
    pred = grid_to_antennas(model.predict(window), inp.grid)                  # [K, S, A]
    pred = np.maximum(stats.denormalize(pred, axis=1), 0.0)
    last = recent.timestamps[-1]
    lines = ["timestamp,antenna_id,service_id,volume"]
    for k in range(horizon):
        ts = format_timestamp(last + np.timedelta64((k + 1) * BIN_SECONDS, "s"))
        for a, aid in enumerate(inp.grid.antenna_ids):
            for s, svc in enumerate(inp.services):
                lines.append(f"{ts},{aid},{svc.id},{float(pred[k, s, a])!r}")
    inputs_hash = sha256_files(*inp.paths, args.checkpoint, *([args.input] if args.input else []))
    out = out_dir(args)
    path = write_text(out / (args.name or "forecast.csv"), provenance(meta.get("seed"), inputs_hash)
                      + "\n".join(lines) + "\n")
    print(f"wrote {path} ({len(lines) - 1} rows)")
    return 0


def cmd_run_paper_pipeline(args) -> int:
    out = out_dir(args)
    o = str(out)
    rows, cols = args.grid
    grid = f"{rows}x{cols}"
    run = lambda argv: dispatch(build_parser().parse_args(argv))
    run(["generate", "--services", str(args.services), "--days", str(args.days), "--grid", grid,
         "--seed", str(args.seed), "--out", o])
    run(["map-grid", "--data", f"{o}/traffic.csv", "--grid", grid, "--seed", str(args.seed), "--out", o])
    data = ["--data", f"{o}/traffic.csv", "--catalog", f"{o}/catalog.csv", "--mapping", f"{o}/mapping.txt",
            "--out", o, "--seed", str(args.seed)]
    for kind in TRAINABLE:
        run(["train", "--model", kind, "--preset", args.preset, "--epochs", str(args.epochs),
             "--lr", repr(args.lr), "--train-stride", str(args.train_stride), "--batch-size", str(args.batch_size),
             "--eval-stride", str(args.eval_stride)] + data)
    ckpts = [f"{o}/{k}.ckpt" for k in TRAINABLE] + ["persistence"]
    run(["compare", "--eval-stride", str(args.eval_stride)] + data + ["--checkpoints"] + ckpts)
    return 0


# -- parser -------------------------------------------------------------------------------

def _common(p):
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("--seed", type=int, default=0)


def _data_flags(p):
    p.add_argument("--data", required=True, help="record CSV")
    p.add_argument("--catalog", required=True, help="service catalog CSV")
    p.add_argument("--mapping", required=True, help="grid mapping table")
    p.add_argument("--t-in", type=positive_int, default=12)
    p.add_argument("--horizon", type=positive_int, default=12)
    p.add_argument("--train-frac", type=fraction, default=0.8)
    p.add_argument("--eval-stride", type=positive_int, default=1)
    p.add_argument("--name", help="output file stem")


def build_parser() -> Parser:
    ap = Parser(prog="traffic-s2s", description="Multi-service mobile traffic forecasting")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset and catalog")
    _common(p)
    p.add_argument("--services", type=positive_int, default=8)
    p.add_argument("--days", type=positive_float, default=28)
    p.add_argument("--grid", type=grid_dims, default=(6, 6), help="RxC; antenna count defaults to R*C")
    p.add_argument("--antennas", type=positive_int)
    p.add_argument("--noise", type=float, default=SyntheticConfig.noise_scale)
    p.add_argument("--top-share", type=fraction)
    p.add_argument("--sporadic", type=int, default=0, help="extra antennas active about half the time")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("map-grid", help="assign antennas to grid cells")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", type=grid_dims)
    p.add_argument("--threshold", type=float, default=0.9, help="minimum active fraction")
    p.set_defaults(func=cmd_map_grid)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _data_flags(p)
    p.add_argument("--model", required=True, choices=sorted(MODEL_CLASSES))
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=positive_int, default=30)
    p.add_argument("--batch-size", type=positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--tf-prob", type=float, default=0.5)
    p.add_argument("--patience", type=positive_int)
    p.add_argument("--val-frac", type=fraction, default=0.1)
    p.add_argument("--train-stride", type=positive_int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint (or 'persistence') on the test split")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare checkpoints on the test split")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="forecast the K bins after the input tail")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="record CSV whose last T_in bins are the input window")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run-paper-pipeline", help="generate, map, train all models, compare")
    _common(p)
    p.add_argument("--services", type=positive_int, default=8)
    p.add_argument("--days", type=positive_float, default=28)
    p.add_argument("--grid", type=grid_dims, default=(6, 6))
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=positive_int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-stride", type=positive_int, default=6)
    p.add_argument("--batch-size", type=positive_int, default=16)
    p.add_argument("--eval-stride", type=positive_int, default=1)
    p.set_defaults(func=cmd_run_paper_pipeline)
    return ap


def dispatch(args) -> int:
    return args.func(args)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (TrafficS2SError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
