"""Training and evaluation loops: deterministic batching, CSV metric logs,
best-checkpoint tracking, and an abort path that preserves the last good
parameters when the loss goes non-finite.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .data import SyntheticSample, generate_dataset
from .metrics import EvalReport, evaluate_predictions
from .model import DeformTraceModel, ModelOutput
from .optim import AdamW, WarmupCosine

log = logging.getLogger(__name__)

LOG_HEADER = [
    "epoch",
    "loss",
    "match",
    "cls",
    "enhance",
    "coop",
    "lr",
    "map",
    "mar",
    "auc",
    "seconds",
]


@dataclass
class TrainResult:
    best_map: float | None
    best_epoch: int
    final_report: EvalReport | None
    history: list[dict] = field(default_factory=list)
    aborted: bool = False
    out_dir: Path | None = None


def _stack(dataset: list[SyntheticSample], idx: np.ndarray):
    seq_v = np.stack([dataset[i].seq_v for i in idx])
    seq_a = np.stack([dataset[i].seq_a for i in idx])
    gts = [dataset[i].segments for i in idx]
    labels = np.array([dataset[i].label for i in idx], dtype=np.float64)
    return seq_v, seq_a, gts, labels


def model_predictions(model: DeformTraceModel, dataset: list[SyntheticSample], batch_size: int = 64):
    """Per-video (segments, confidences) plus video scores, without autodiff."""
    preds = []
    scores = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            seq_v, seq_a, _, _ = _stack(dataset, idx)
            out = model(seq_v, seq_a)
            p = out.prediction
            for i in range(len(idx)):
                preds.append((p.segments[i], p.confidence[i]))
                scores.append(p.video_score[i])
    return preds, np.asarray(scores)


def evaluate_model(model: DeformTraceModel, dataset: list[SyntheticSample], batch_size: int = 64) -> EvalReport:
    preds, scores = model_predictions(model, dataset, batch_size)
    gts = [s.segments for s in dataset]
    labels = np.array([s.label for s in dataset])
    return evaluate_predictions(preds, gts, labels, scores)


def make_datasets(cfg: RunConfig) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Train/eval splits from disjoint seed streams of the run seed."""
    train = generate_dataset(cfg.n_train, cfg.c_in, cfg.n_1, cfg.difficulty, seed=cfg.seed * 2 + 1, ramp=cfg.ramp)
    evalset = generate_dataset(cfg.n_eval, cfg.c_in, cfg.n_1, cfg.difficulty, seed=cfg.seed * 2 + 2, ramp=cfg.ramp)
    return train, evalset


def run_training(
    cfg: RunConfig,
    out_dir: str | Path,
    train_set: list[SyntheticSample] | None = None,
    eval_set: list[SyntheticSample] | None = None,
    quiet: bool = False,
) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "run.cfg")
    if train_set is None or eval_set is None:
        gen_train, gen_eval = make_datasets(cfg)
        train_set = train_set if train_set is not None else gen_train
        eval_set = eval_set if eval_set is not None else gen_eval

    rng = np.random.default_rng(cfg.seed)
    model = DeformTraceModel(rng, cfg.model_config())
    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, (len(train_set) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    sched = WarmupCosine(cfg.lr, warmup_steps, total_steps)

    log_path = out / "train_log.csv"
    log_fh = open(log_path, "w", newline="")
    writer = csv.writer(log_fh)
    writer.writerow(LOG_HEADER)
    log_fh.flush()

    best_map: float | None = None
    best_epoch = -1
    history: list[dict] = []
    save_checkpoint(model.state_dict(), out / "last.dtck")
    if cfg.epochs == 0:
        save_checkpoint(model.state_dict(), out / "best.dtck")
        log_fh.close()
        _write_result(out, None, -1, None, history, False)
        return TrainResult(None, -1, None, history, False, out)

    aborted = False
    final_report: EvalReport | None = None
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_set))
        sums = {"loss": 0.0, "match": 0.0, "cls": 0.0, "enhance": 0.0, "coop": 0.0}
        nb = 0
        lr = cfg.lr
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                seq_v, seq_a, gts, labels = _stack(train_set, idx)
                out_m = model(seq_v, seq_a)
                total, comps, _ = model.loss(out_m, gts, labels)
                opt.zero_grad()
                total.backward()
                if cfg.clip_norm > 0:
                    opt.clip_grad_norm(cfg.clip_norm)
                lr = sched.lr(step)
                opt.step(lr)
                step += 1
                sums["loss"] += comps["total"]
                sums["match"] += comps["match"]
                sums["cls"] += comps["cls"]
                sums["enhance"] += comps["enhance"]
                sums["coop"] += comps["coop"]
                nb += 1
            for name, p in params.items():
                if not np.all(np.isfinite(p.data)):
                    raise FloatingPointError(f"parameter '{name}' went non-finite")
        except FloatingPointError as exc:
            log.error("aborting at epoch %d: %s (last good checkpoint retained)", epoch, exc)
            aborted = True

        if aborted:
            break
        save_checkpoint(model.state_dict(), out / "last.dtck")
        row = {k: sums[k] / nb for k in sums}
        row["epoch"] = epoch
        row["lr"] = lr
        do_eval = (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        report = None
        if do_eval:
            try:
                report = evaluate_model(model, eval_set, batch_size=max(cfg.batch_size, 64))
            except FloatingPointError as exc:
                log.error("aborting at epoch %d: %s (last good checkpoint retained)", epoch, exc)
                aborted = True
                break
            final_report = report
            row["map"] = report.map_score
            row["mar"] = report.mar_score
            row["auc"] = report.auc
            if report.map_score is not None and (best_map is None or report.map_score > best_map):
                best_map = report.map_score
                best_epoch = epoch
                save_checkpoint(model.state_dict(), out / "best.dtck")
        row["seconds"] = time.time() - t0
        history.append(row)
        writer.writerow([_fmt(row.get(k)) for k in LOG_HEADER])
        log_fh.flush()
        if not quiet:
            msg = f"epoch {epoch}: loss={row['loss']:.4f}"
            if report is not None:
                msg += f" {report.summary()}"
            log.info(msg)

    log_fh.close()
    if best_epoch < 0:
        # never cleared the bar: keep the last model as best, except after an
        # abort, where the current parameters may be the diverged ones
        if aborted:
            (out / "best.dtck").write_bytes((out / "last.dtck").read_bytes())
        else:
            save_checkpoint(model.state_dict(), out / "best.dtck")
    _write_result(out, best_map, best_epoch, final_report, history, aborted)
    return TrainResult(best_map, best_epoch, final_report, history, aborted, out)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _write_result(out: Path, best_map, best_epoch, report: EvalReport | None, history, aborted) -> None:
    payload = {
        "best_map": best_map,
        "best_epoch": best_epoch,
        "aborted": aborted,
        "final": None,
    }
    if report is not None:
        payload["final"] = {
            "map": report.map_score,
            "mar": report.mar_score,
            "auc": report.auc,
            "ap_per_iou": {str(k): v for k, v in report.ap_per_iou.items()},
            "ar_per_budget": {str(k): v for k, v in report.ar_per_budget.items()},
        }
    (out / "result.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_model(cfg: RunConfig, ckpt_path: str | Path) -> DeformTraceModel:
    model = DeformTraceModel(np.random.default_rng(cfg.seed), cfg.model_config())
    model.load_state(load_checkpoint(ckpt_path))
    return model
