"""Command-line driver for the full experiment protocol.

Every subcommand writes its artifacts atomically into a run directory and
speaks a fixed exit-code vocabulary: 0 ok, 2 usage, 3 config, 4 data,
5 numeric. Errors are a single machine-parsable stderr line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import config as config_mod
from .data import GenParams, child_seed, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    MISSING_PATTERNS,
    eval_histograms,
    evaluate,
    diagnostics,
    export_diagnostics,
    inject_missing,
    mannwhitney_u,
    robustness_sweep,
)
from .models import ARCHS, build_model
from .training import HISTORY_COLUMNS, load_checkpoint, restore_model, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line errors instead of usage dumps
        print(f"smagnet: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- artifact helpers -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header: tuple, rows: list) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[h]) for h in header) + "\n")
    os.replace(tmp, path)


def _write_json(path, doc: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(json.dumps(doc, sort_keys=True, indent=2))
        f.write("\n")
    os.replace(tmp, path)


def _read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _update_checksums(run_dir: str, names: list[str]) -> None:
    # figures are regenerable views, so they stay out of the manifest
    path = os.path.join(run_dir, "checksums.json")
    sums = _read_json(path) if os.path.exists(path) else {}
    for name in names:
        sums[name] = _sha256(os.path.join(run_dir, name))
    _write_json(path, sums)


def _load_run(run_dir: str):
    cfg_path = os.path.join(run_dir, "config.json")
    ckpt_path = os.path.join(run_dir, "checkpoint.bin")
    if not os.path.isfile(cfg_path):
        raise DataError(f"{run_dir}: missing config.json (not a run directory?)")
    if not os.path.isfile(ckpt_path):
        raise DataError(f"{run_dir}: missing checkpoint.bin (train first)")
    cfg = config_mod.resolve_config(_read_json(cfg_path))
    ckpt = load_checkpoint(ckpt_path)
    return cfg, ckpt


def _require_dataset(path: str):
    if not os.path.isdir(path):
        raise DataError(f"dataset directory {path} does not exist")
    return read_dataset(path)


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    params = GenParams(size=args.size)
    ds = generate_dataset(args.scenes, args.seed, params)
    write_dataset(args.out, ds)
    counts = {k: len(v) for k, v in ds.splits.items()}
    warning = ds.meta.get("warning")
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    print(
        f"wrote {args.scenes} scenes ({args.size}x{args.size}) to {args.out} "
        f"[train/val/test = {counts['train']}/{counts['val']}/{counts['test']}]"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config)
    if args.data is not None:
        cfg["data"]["dir"] = args.data
    if args.model is not None:
        cfg["model"]["arch"] = args.model
    if args.fusion_mode is not None:
        cfg["model"]["fusion_mode"] = args.fusion_mode
    if args.no_spatial_mask:
        cfg["model"]["spatial_mask"] = False
    if args.independent_decoders:
        cfg["model"]["shared_decoder"] = False
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed

    model_cfg = config_mod.model_config(cfg)
    train_cfg = config_mod.train_config(cfg)
    ds = _require_dataset(cfg["data"]["dir"])

    model = build_model(model_cfg, train_cfg.seed)
    result = train(model, ds, train_cfg)

    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), config_mod.resolved_to_json(cfg, train_cfg))
    _write_csv(os.path.join(args.out, "history.csv"), HISTORY_COLUMNS, result.history)
    save_checkpoint(os.path.join(args.out, "checkpoint.bin"), model, result, train_cfg.seed)
    from . import figures

    figures.loss_curves(result.history, os.path.join(args.out, "history.png"))
    _update_checksums(args.out, ["config.json", "history.csv", "checkpoint.bin"])
    if result.threshold_warning:
        print("warning: validation labels are single-class; threshold fell back to 0.5", file=sys.stderr)
    print(
        f"trained {model_cfg.arch} ({train_cfg.epochs} epochs, seed {train_cfg.seed}): "
        f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}, "
        f"threshold {result.threshold:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, ckpt = _load_run(args.run)
    ds = _require_dataset(args.data)
    model = restore_model(ckpt)
    batch = int(cfg["eval"]["batch_size"])
    report = evaluate(model, ds, "test", ckpt.threshold, batch)
    doc = report.to_json()
    doc["arch"] = ckpt.model_cfg.arch
    doc["seed"] = ckpt.seed
    _write_json(os.path.join(args.run, "eval.json"), doc)
    header = ("scene_id", "iou", "oa", "precision", "recall", "tp", "fp", "fn", "tn")
    rows = [
        {"scene_id": s.scene_id, **s.metrics, **s.counts.to_json()} for s in report.per_scene
    ]
    _write_csv(os.path.join(args.run, "per_scene.csv"), header, rows)

    hists = eval_histograms(model, ds, "test", ckpt.threshold, batch)
    for name in ("ndvi", "nir"):
        edges, fn, fp = hists[name]
        hrows = [
            {"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "fn": int(fn[i]), "fp": int(fp[i])}
            for i in range(len(fn))
        ]
        _write_csv(os.path.join(args.run, f"hist_{name}.csv"), ("bin_lo", "bin_hi", "fn", "fp"), hrows)
    from . import figures

    figures.misclass_histograms(hists, os.path.join(args.run, "misclass_hist.png"))
    _update_checksums(
        args.run, ["eval.json", "per_scene.csv", "hist_ndvi.csv", "hist_nir.csv"]
    )
    p = report.pooled
    print(
        f"test split ({len(report.per_scene)} scenes) @ threshold {report.threshold:.4f}: "
        f"IoU {p['iou']:.4f}  OA {p['oa']:.4f}  P {p['precision']:.4f}  R {p['recall']:.4f}"
    )
    return EXIT_OK


def _parse_ratios(text: str) -> tuple[float, ...]:
    try:
        pcts = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"--ratios must be comma-separated percentages: {text!r}") from e
    if not pcts:
        raise ConfigError("--ratios must name at least one percentage")
    for p in pcts:
        if not 0.0 <= p <= 100.0:
            raise ConfigError(f"missing ratio {p} outside [0, 100]")
    return tuple(p / 100.0 for p in pcts)


def cmd_sweep(args) -> int:
    cfg, ckpt = _load_run(args.run)
    ds = _require_dataset(args.data)
    model = restore_model(ckpt)
    ratios = _parse_ratios(args.ratios)
    seeds = tuple(int(s) for s in cfg["eval"]["sweep_seeds"])
    sw = robustness_sweep(
        model,
        ds,
        ckpt.threshold,
        ratios=ratios,
        seeds=seeds,
        pattern=args.pattern,
        batch_size=int(cfg["eval"]["batch_size"]),
    )
    rows = [
        {
            "ratio": f"{row['ratio'] * 100:g}",
            "mean_iou": row["mean_iou"],
            "std_iou": row["std_iou"],
            "delta": sw.delta,
        }
        for row in sw.rows
    ]
    _write_csv(os.path.join(args.run, "sweep.csv"), ("ratio", "mean_iou", "std_iou", "delta"), rows)
    prows = [
        {**rec, "ratio": f"{rec['ratio'] * 100:g}"}
        for rec in sw.records
    ]
    _write_csv(
        os.path.join(args.run, "sweep_per_scene.csv"),
        ("ratio", "seed", "scene_id", "iou", "oa", "precision", "recall"),
        prows,
    )
    from . import figures

    figures.robustness_curve(sw.rows, os.path.join(args.run, "robustness.png"), label=ckpt.model_cfg.arch)
    _update_checksums(args.run, ["sweep.csv", "sweep_per_scene.csv"])
    print(
        f"sweep ({args.pattern}, seeds {list(seeds)}): "
        + "  ".join(f"{row['ratio'] * 100:g}%={row['mean_iou']:.4f}" for row in sw.rows)
        + f"  delta={sw.delta:.4f}"
    )
    return EXIT_OK


def _read_column(path: str, column: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise DataError(f"{path}: no column {column!r} (have {reader.fieldnames})")
        vals = [float(row[column]) for row in reader]
    if not vals:
        raise DataError(f"{path}: no data rows")
    return np.asarray(vals, dtype=np.float64)


def cmd_stats(args) -> int:
    a = _read_column(args.a, args.column)
    b = _read_column(args.b, args.column)
    u, p = mannwhitney_u(a, b)
    print(
        f"mannwhitney column={args.column} n_a={len(a)} n_b={len(b)} "
        f"U={u:g} p={p:.6g} reject_at_0.05={'yes' if p < 0.05 else 'no'}"
    )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg, ckpt = _load_run(args.run)
    data_dir = args.data if args.data is not None else cfg["data"]["dir"]
    ds = _require_dataset(data_dir)
    if args.scene not in ds.scenes:
        raise DataError(f"scene {args.scene!r} not in dataset (e.g. {next(iter(ds.scenes))!r})")
    scene = ds.scenes[args.scene]
    if args.missing > 0.0:
        rng = np.random.default_rng(child_seed(ckpt.seed, "diagnose", int(args.missing * 100)))
        fill = float(ds.meta.get("params", {}).get("fill_value", 0.0))
        scene = inject_missing(scene, args.missing, args.pattern, rng, fill)
    model = restore_model(ckpt)
    diag = diagnostics(model, scene, ds.stats)
    out = os.path.join(args.run, "diagnostics.bin")
    export_diagnostics(
        out,
        diag,
        {"model": ckpt.model_cfg.to_json(), "missing": args.missing, "pattern": args.pattern},
    )
    from . import figures
    from .autodiff.serialization import read_container

    entries, _ = read_container(out)
    figures.gate_pyramid(entries, os.path.join(args.run, "gate_pyramid.png"))
    figures.mse_map(diag.mse_map, os.path.join(args.run, "mse_map.png"))
    _update_checksums(args.run, ["diagnostics.bin"])
    valid = scene.validity.astype(bool)
    inside = diag.mse_map[valid].max() if valid.any() else 0.0
    outside = diag.mse_map[~valid].max() if (~valid).any() else 0.0
    print(
        f"diagnostics for scene {scene.scene_id} (missing {args.missing:g}, {args.pattern}): "
        f"max MSE valid={inside:.3e} missing={outside:.3e} -> {out}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    curves = []
    for run_dir in args.runs:
        cfg_path = os.path.join(run_dir, "config.json")
        if not os.path.isfile(cfg_path):
            raise DataError(f"{run_dir}: missing config.json")
        cfg = config_mod.resolve_config(_read_json(cfg_path))
        name = os.path.basename(os.path.normpath(run_dir))
        row = {
            "run": name,
            "arch": cfg["model"]["arch"],
            "fusion_mode": cfg["model"]["fusion_mode"],
            "spatial_mask": cfg["model"]["spatial_mask"],
            "shared_decoder": cfg["model"]["shared_decoder"],
            "seed": cfg["train"]["seed"],
            "epochs": cfg["train"]["epochs"],
            "threshold": "",
            "iou": "",
            "oa": "",
            "precision": "",
            "recall": "",
            "iou_r0": "",
            "iou_r25": "",
            "iou_r50": "",
            "iou_r75": "",
            "iou_r100": "",
            "delta": "",
        }
        eval_path = os.path.join(run_dir, "eval.json")
        if os.path.isfile(eval_path):
            doc = _read_json(eval_path)
            row["threshold"] = doc["threshold"]
            for k in ("iou", "oa", "precision", "recall"):
                row[k] = doc["pooled"][k]
        sweep_path = os.path.join(run_dir, "sweep.csv")
        if os.path.isfile(sweep_path):
            with open(sweep_path, "r", encoding="utf-8", newline="") as f:
                srows = list(csv.DictReader(f))
            curve = []
            for s in srows:
                pct = float(s["ratio"])
                key = f"iou_r{pct:g}"
                if key in row:
                    row[key] = float(s["mean_iou"])
                row["delta"] = float(s["delta"])
                curve.append(
                    {"ratio": pct / 100.0, "mean_iou": float(s["mean_iou"]), "std_iou": float(s["std_iou"])}
                )
            curves.append((name, curve))
        rows.append(row)
    header = tuple(rows[0].keys())
    _write_csv(args.out, header, rows)
    from . import figures

    stem = os.path.splitext(args.out)[0]
    figures.report_bars(rows, f"{stem}_iou.png")
    if curves:
        figures.report_robustness(curves, f"{stem}_robustness.png")
    print(f"report over {len(rows)} runs -> {args.out}")
    return EXIT_OK


# -- parser / entry ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smagnet", description="dual-stream gated-fusion segmentation experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--scenes", type=int, default=384)
    g.add_argument("--size", type=int, default=64, help="scene extent (multiple of 32)")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model into a run directory")
    t.add_argument("--config", default=None, help="JSON run config (defaults used if omitted)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", default=None, help="dataset directory (overrides config data.dir)")
    t.add_argument("--model", choices=ARCHS, default=None)
    t.add_argument("--fusion-mode", choices=("complementary", "independent", "cross"), default=None)
    t.add_argument("--no-spatial-mask", action="store_true", help="ablation: disable the spatial mask")
    t.add_argument("--independent-decoders", action="store_true", help="ablation: unshare the decoder")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run's checkpoint on the test split")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-missing", help="robustness sweep over MSI missingness ratios")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ratios", default="0,25,50,75,100", help="comma-separated percentages")
    s.add_argument("--pattern", choices=MISSING_PATTERNS, default="band")
    s.set_defaults(func=cmd_sweep)

    st = sub.add_parser("stats", help="Mann-Whitney U between two per-scene CSV columns")
    st.add_argument("--a", required=True, help="first per_scene.csv")
    st.add_argument("--b", required=True, help="second per_scene.csv")
    st.add_argument("--column", default="iou")
    st.set_defaults(func=cmd_stats)

    d = sub.add_parser("diagnose", help="export gate pyramid and decoder-divergence map")
    d.add_argument("--run", required=True)
    d.add_argument("--scene", required=True, help="scene id within the dataset")
    d.add_argument("--data", default=None, help="dataset directory (default: run config data.dir)")
    d.add_argument("--missing", type=float, default=0.0, help="inject this missing fraction first")
    d.add_argument("--pattern", choices=MISSING_PATTERNS, default="band")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("report", help="comparison table + figures over run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True, help="output CSV path")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:  # argparse help/usage paths
        return int(e.code or 0)
    except ConfigError as e:
        print(f"smagnet: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"smagnet: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"smagnet: error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"smagnet: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
