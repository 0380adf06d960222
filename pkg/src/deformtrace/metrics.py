"""Detection evaluation: interval overlap, mAP over IoU thresholds, mAR over
proposal budgets, and ranking AUC for the video-level score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import iou_1d

MAP_THRESHOLDS = (0.5, 0.75, 0.9, 0.95)
MAR_BUDGETS = (5, 10, 20, 30, 50, 100)
# 0.5:0.05:0.95 as exact rationals to keep threshold comparisons clean
MAR_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))


@dataclass
class EvalReport:
    ap_per_iou: dict[float, float]
    map_score: float | None
    ar_per_budget: dict[int, float]
    mar_score: float | None
    auc: float | None
    counts: dict[str, int] = field(default_factory=dict)

    def summary(self) -> str:
        parts = []
        parts.append(f"mAP={self.map_score:.4f}" if self.map_score is not None else "mAP=n/a")
        parts.append(f"mAR={self.mar_score:.4f}" if self.mar_score is not None else "mAR=n/a")
        parts.append(f"AUC={self.auc:.4f}" if self.auc is not None else "AUC=n/a")
        return " ".join(parts)


def _ranked_predictions(predictions):
    """Global confidence ranking; ties broken by (video, slot) for determinism."""
    order = []
    for vid, (segs, confs) in enumerate(predictions):
        segs = np.asarray(segs, dtype=np.float64).reshape(-1, 2)
        confs = np.asarray(confs, dtype=np.float64).reshape(-1)
        if segs.shape[0] != confs.shape[0]:
            raise ValueError("each prediction needs one confidence")
        for j in range(segs.shape[0]):
            order.append((-confs[j], vid, j, segs[j, 0], segs[j, 1]))
    order.sort()
    return order


def _match_flags(ranked, gts, threshold):
    """TP/FP flag per ranked prediction under greedy per-video matching."""
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    flags = np.zeros(len(ranked), dtype=bool)
    for r, (_negconf, vid, _j, t, d) in enumerate(ranked):
        gt = gts[vid]
        best, best_i = 0.0, -1
        for i in range(len(gt)):
            if taken[vid][i]:
                continue
            iou = iou_1d(t, d, gt[i][0], gt[i][1])
            if iou > best:
                best, best_i = iou, i
        if best_i >= 0 and best >= threshold:
            taken[vid][best_i] = True
            flags[r] = True
    return flags


def _average_precision(flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked TP/FP flags."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, mrec.size):
        ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return float(ap)


def compute_map(predictions, gts, thresholds=MAP_THRESHOLDS):
    """predictions: per video (segments (N,2), confidences (N,)); gts: per
    video (M, 2) arrays. Returns ({iou: AP}, mAP); mAP is None when the
    dataset has no ground-truth segments at all."""
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths must align per video")
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 2) for g in gts]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return {}, None
    ranked = _ranked_predictions(predictions)
    ap_per_iou = {}
    for thr in thresholds:
        flags = _match_flags(ranked, gts, thr)
        ap_per_iou[thr] = _average_precision(flags, n_gt)
    return ap_per_iou, float(np.mean(list(ap_per_iou.values())))


def compute_mar(predictions, gts, budgets=MAR_BUDGETS):
    """Per budget k: keep top-k proposals per video, average recall over the
    0.5:0.05:0.95 IoU grid. Returns ({k: AR}, mAR)."""
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths must align per video")
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 2) for g in gts]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return {}, None
    ar_per_budget = {}
    for k in budgets:
        if k <= 0:
            ar_per_budget[k] = 0.0
            continue
        topk = []
        for segs, confs in predictions:
            segs = np.asarray(segs, dtype=np.float64).reshape(-1, 2)
            confs = np.asarray(confs, dtype=np.float64).reshape(-1)
            keep = np.argsort(-confs, kind="stable")[:k]
            topk.append((segs[keep], confs[keep]))
        ranked = _ranked_predictions(topk)
        recalls = []
        for thr in MAR_THRESHOLDS:
            flags = _match_flags(ranked, gts, thr)
            recalls.append(flags.sum() / n_gt)
        ar_per_budget[k] = float(np.mean(recalls))
    return ar_per_budget, float(np.mean(list(ar_per_budget.values())))


def compute_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC (ties count half); None when one class is absent."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (pos.size * neg.size))


def evaluate_predictions(predictions, gts, labels, scores) -> EvalReport:
    ap_per_iou, map_score = compute_map(predictions, gts)
    ar_per_budget, mar_score = compute_mar(predictions, gts)
    auc = compute_auc(scores, labels)
    return EvalReport(
        ap_per_iou=ap_per_iou,
        map_score=map_score,
        ar_per_budget=ar_per_budget,
        mar_score=mar_score,
        auc=auc,
        counts={
            "videos": len(gts),
            "gt_segments": int(sum(np.asarray(g).reshape(-1, 2).shape[0] for g in gts)),
        },
    )
