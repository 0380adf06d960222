"""Command-line entry point: train, eval, bench, visualize, ablate.

DT_THREADS caps worker/BLAS threads (all internal reductions are ordered and
single-process; --deterministic additionally pins DT_THREADS to 1).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import encoder_attention, offband_fraction, relay_band, save_pgm
from .bench import DEFAULT_LENGTHS, VARIANTS as BENCH_VARIANTS, run_bench
from .config import RunConfig, load_config, save_config
from .data import load_features, perturb_features
from .metrics import MAP_THRESHOLDS, MAR_BUDGETS, compute_auc, compute_map, compute_mar
from .model import VARIANTS
from .ssm import offband_mass, save_hidden_attention_csv
from .train import evaluate_model, load_model, make_datasets, model_predictions, run_training

log = logging.getLogger("deformtrace")

# ablation cells beyond the model variants proper
ABLATE_ALIASES = {
    "no_relay_losses": {"variant": "deformtrace", "lam1": 0.0, "lam2": 0.0},
}


def _apply_threads(deterministic: bool) -> None:
    threads = os.environ.get("DT_THREADS")
    if deterministic:
        threads = "1"
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out or "runs/train")
    result = run_training(cfg, out)
    if result.aborted:
        print("training aborted on non-finite loss; last good checkpoint retained")
        return 1
    if result.final_report is not None:
        print(result.final_report.summary())
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    model = load_model(cfg, args.ckpt)
    if args.features:
        paths = sorted(Path(args.features).glob("*.dtfv"))
        if not paths:
            raise SystemExit(f"no .dtfv files under {args.features}")
        dataset = [load_features(p) for p in paths]
    else:
        _, dataset = make_datasets(cfg)
    if args.perturb_intensity:
        dataset = perturb_features(dataset, "gaussian_noise", args.perturb_intensity, cfg.seed + 9000)
    budgets = [int(x) for x in args.budgets.split(",")] if args.budgets else list(MAR_BUDGETS)
    thresholds = (
        [float(x) for x in args.thresholds.split(",")] if args.thresholds else list(MAP_THRESHOLDS)
    )
    preds, scores = model_predictions(model, dataset)
    gts = [s.segments for s in dataset]
    labels = np.array([s.label for s in dataset])
    ap_per_iou, map_score = compute_map(preds, gts, thresholds)
    ar_per_budget, mar_score = compute_mar(preds, gts, budgets)
    auc = compute_auc(scores, labels)

    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "key", "value"])
        for k, v in ap_per_iou.items():
            w.writerow(["ap", k, f"{v:.6f}"])
        for k, v in ar_per_budget.items():
            w.writerow(["ar", k, f"{v:.6f}"])
        w.writerow(["map", "", "" if map_score is None else f"{map_score:.6f}"])
        w.writerow(["mar", "", "" if mar_score is None else f"{mar_score:.6f}"])
        w.writerow(["auc", "", "" if auc is None else f"{auc:.6f}"])
    for k in sorted(ap_per_iou):
        print(f"AP@{k}: {ap_per_iou[k]:.4f}")
    for k in sorted(ar_per_budget):
        print(f"AR@{k}: {ar_per_budget[k]:.4f}")
    print(f"mAP: {'n/a' if map_score is None else f'{map_score:.4f}'}")
    print(f"mAR: {'n/a' if mar_score is None else f'{mar_score:.4f}'}")
    print(f"AUC: {'n/a' if auc is None else f'{auc:.4f}'}")
    return 0


def cmd_bench(args) -> int:
    lengths = (
        [int(x) for x in args.lengths.split(",")] if args.lengths else list(DEFAULT_LENGTHS)
    )
    variants = args.variants.split(",") if args.variants else list(BENCH_VARIANTS)
    out = Path(args.out or "runs/bench")
    out.mkdir(parents=True, exist_ok=True)
    results = run_bench(lengths, variants, repeats=args.repeats, out_path=out / "bench.csv")
    for name, entry in results["variants"].items():
        print(f"{name}: slope={entry['slope']:.3f}")
    (out / "bench_summary.json").write_text(json.dumps(results, indent=2), encoding="utf-8")
    return 0


def cmd_visualize(args) -> int:
    cfg = _load_run_config(args)
    model = load_model(cfg, args.ckpt)
    _, dataset = make_datasets(cfg)
    if not 0 <= args.index < len(dataset):
        raise SystemExit(f"--index out of range [0, {len(dataset) - 1}]")
    sample = dataset[args.index]
    alpha, positions = encoder_attention(model, sample, args.layer)
    band = args.band if args.band is not None else relay_band(alpha.shape[0], cfg.n_r)
    out = Path(args.out or "runs/visualize")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"hidden_attention_l{args.layer}_i{args.index}.csv"
    save_hidden_attention_csv(alpha, csv_path, relay_positions=positions, band=band)
    pgm_path = out / f"hidden_attention_l{args.layer}_i{args.index}.pgm"
    save_pgm(alpha, pgm_path)
    print(f"alpha {alpha.shape[0]}x{alpha.shape[1]}; off-band mass {offband_mass(alpha, band):.4f}")
    print(f"wrote {csv_path} and {pgm_path}")
    return 0


def _parse_cells(args) -> list[dict]:
    cells: list[dict] = []
    variants = args.variants.split(",") if args.variants else ["deformtrace"]
    n_rs = [int(x) for x in args.n_r.split(",")] if args.n_r else [None]
    durations = [int(x) for x in args.durations.split(",")] if args.durations else [None]
    for var in variants:
        if var not in VARIANTS and var not in ABLATE_ALIASES:
            raise SystemExit(
                f"unknown ablation cell {var!r}; choose from {VARIANTS + tuple(ABLATE_ALIASES)}"
            )
        for n_r in n_rs:
            for dur in durations:
                over: dict = dict(ABLATE_ALIASES.get(var, {"variant": var}))
                if n_r is not None:
                    over["n_r"] = n_r
                if dur is not None:
                    over["n_1"] = dur
                name = var
                if n_r is not None:
                    name += f"_nr{n_r}"
                if dur is not None:
                    name += f"_t{dur}"
                cells.append({"name": name, "overrides": over})
    return cells


def cmd_ablate(args) -> int:
    base = _load_run_config(args)
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else [base.seed]
    cells = _parse_cells(args)
    out = Path(args.out or "runs/ablate")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cells:
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed, **cell["overrides"])
            cell_dir = out / f"{cell['name']}_s{seed}"
            result = run_training(cfg, cell_dir, quiet=True)
            rep = result.final_report
            rows.append(
                {
                    "cell": cell["name"],
                    "seed": seed,
                    "map": None if rep is None else rep.map_score,
                    "mar": None if rep is None else rep.mar_score,
                    "auc": None if rep is None else rep.auc,
                }
            )
            print(
                f"{cell['name']} seed={seed}: "
                + (rep.summary() if rep is not None else "no eval")
            )
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "seed", "map", "mar", "auc"])
        for r in rows:
            w.writerow(
                [
                    r["cell"],
                    r["seed"],
                    "" if r["map"] is None else f"{r['map']:.6f}",
                    "" if r["mar"] is None else f"{r['mar']:.6f}",
                    "" if r["auc"] is None else f"{r['auc']:.6f}",
                ]
            )
    print(f"table in {out / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformtrace", description=__doc__)
    p.add_argument("--deterministic", action="store_true", help="single-thread, ordered reductions")
    sub = p.add_subparsers(dest="command", required=True)

    tp = sub.add_parser("train", help="train a model from a run config")
    tp.add_argument("--config", help="run config path (defaults: built-in)")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--out")
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--config")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--seed", type=int)
    ep.add_argument("--out")
    ep.add_argument("--budgets", help="comma list, default 5,10,20,30,50,100")
    ep.add_argument("--thresholds", help="comma list, default 0.5,0.75,0.9,0.95")
    ep.add_argument("--features", help="directory of .dtfv files instead of synthetic data")
    ep.add_argument("--perturb-intensity", type=int, choices=range(1, 6))
    ep.set_defaults(fn=cmd_eval)

    bp = sub.add_parser("bench", help="runtime scaling: scan vs dense attention")
    bp.add_argument("--lengths", help="comma list, default 256..16384")
    bp.add_argument("--variants", help=f"comma list from {BENCH_VARIANTS}")
    bp.add_argument("--repeats", type=int, default=5)
    bp.add_argument("--out")
    bp.set_defaults(fn=cmd_bench)

    vp = sub.add_parser("visualize", help="hidden-attention CSV + PGM export")
    vp.add_argument("--config")
    vp.add_argument("--ckpt", required=True)
    vp.add_argument("--seed", type=int)
    vp.add_argument("--layer", type=int, default=0)
    vp.add_argument("--index", type=int, default=0)
    vp.add_argument("--band", type=float, help="off-band distance; default scan_len/(N_r+1)")
    vp.add_argument("--out")
    vp.set_defaults(fn=cmd_visualize)

    ap = sub.add_parser("ablate", help="train/eval a grid of configurations")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--variants", help="comma list of variants (plus no_relay_losses)")
    ap.add_argument("--n-r", dest="n_r", help="comma list of relay counts")
    ap.add_argument("--durations", help="comma list of sequence lengths")
    ap.add_argument("--seeds", help="comma list of seeds")
    ap.add_argument("--out")
    ap.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    _apply_threads(args.deterministic)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
