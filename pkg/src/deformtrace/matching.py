"""Set-prediction supervision: 1-D interval overlap, optimal bipartite
assignment via shortest augmenting paths, focal/L1/overlap losses, and the
total training objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# cost/loss weights (classification, L1 regression, interval overlap)
W_CLS = 2.0
W_L1 = 5.0
W_IOU = 2.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
ANCHOR_EPS = 1e-4


def iou_1d(t1: float, d1: float, t2: float, d2: float) -> float:
    """Overlap of centered intervals [t - d/2, t + d/2]; 0 when the union is
    empty (both degenerate)."""
    s1, e1 = t1 - d1 / 2.0, t1 + d1 / 2.0
    s2, e2 = t2 - d2 / 2.0, t2 + d2 / 2.0
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest-augmenting-path algorithm with dual potentials; O(n^2 m).
    Requires rows <= columns. Returns col index per row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"need rows <= cols, got {n}x{m}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] > 0:
            out[p[j] - 1] = j - 1
    return out


def assignment_cost(cost: np.ndarray, cols: np.ndarray) -> float:
    return float(sum(cost[i, c] for i, c in enumerate(cols)))


def match_cost_matrix(conf: np.ndarray, anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(N_f, N_q) matching costs: w_cls*(1-conf) + w_l1*(|dt|+|dd|) + w_iou*(1-IoU)."""
    n_q = anchors.shape[0]
    n_f = gt.shape[0]
    out = np.zeros((n_f, n_q))
    for i in range(n_f):
        for j in range(n_q):
            l1 = abs(anchors[j, 0] - gt[i, 0]) + abs(anchors[j, 1] - gt[i, 1])
            iou = iou_1d(anchors[j, 0], anchors[j, 1], gt[i, 0], gt[i, 1])
            out[i, j] = W_CLS * (1.0 - conf[j]) + W_L1 * l1 + W_IOU * (1.0 - iou)
    return out


def focal_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary focal loss (alpha=0.25, gamma=2), logits input.

    Stable: log p = -softplus(-x), log (1-p) = -softplus(x).
    """
    t = Tensor(np.asarray(targets, dtype=np.float64))
    if t.data.shape != logits.data.shape:
        raise ValueError("targets must match logits shape")
    p = T.sigmoid(logits)
    one = Tensor(np.ones_like(t.data))
    pos = (p * (-1.0) + one) ** FOCAL_GAMMA * T.softplus(logits * (-1.0)) * FOCAL_ALPHA
    neg = p**FOCAL_GAMMA * T.softplus(logits) * (1.0 - FOCAL_ALPHA)
    return t * pos + (one - t) * neg


def giou_1d_t(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Generalized 1-D interval overlap per row of (N, 2) [t, d] pairs.

    IoU - (hull - union)/hull; defined (and differentiable) for disjoint
    intervals, reaching 1 only on exact agreement.
    """
    t = T.reshape(T.narrow(pred, -1, 0, 1), (pred.data.shape[0],))
    d = T.reshape(T.narrow(pred, -1, 1, 1), (pred.data.shape[0],))
    s1 = t - d * 0.5
    e1 = t + d * 0.5
    s2 = Tensor(gt[:, 0] - gt[:, 1] / 2.0)
    e2 = Tensor(gt[:, 0] + gt[:, 1] / 2.0)
    inter = T.clamp_min(T.minimum(e1, e2) - T.maximum(s1, s2), 0.0)
    union = (e1 - s1) + Tensor(gt[:, 1]) - inter
    hull = T.maximum(e1, e2) - T.minimum(s1, s2)
    return inter / union - (hull - union) / hull


@dataclass
class MatchResult:
    loss: Tensor
    assignments: list[np.ndarray]  # per video: query index per gt segment
    components: dict[str, float] = field(default_factory=dict)


def match_loss(logits: Tensor, anchors: Tensor, gt_segments: list[np.ndarray]) -> MatchResult:
    """Hungarian-matched set loss for one decoder layer, averaged over videos.

    Per video: focal classification over all queries (matched queries target
    1, the rest background), plus L1 and overlap regression on matched pairs,
    each normalized by max(N_f, 1).
    """
    b, n_q = logits.data.shape
    if len(gt_segments) != b:
        raise ValueError("one ground-truth list per video required")
    with T.no_grad():
        conf = T.sigmoid(logits).data
    targets = np.zeros((b, n_q))
    assignments: list[np.ndarray] = []
    flat_idx: list[int] = []
    flat_gt: list[np.ndarray] = []
    weights: list[float] = []
    for vb in range(b):
        gt = np.asarray(gt_segments[vb], dtype=np.float64).reshape(-1, 2)
        n_f = gt.shape[0]
        if n_f > n_q:
            raise ValueError(f"N_f={n_f} exceeds N_q={n_q}")
        if n_f == 0:
            assignments.append(np.zeros(0, dtype=np.int64))
            continue
        cost = match_cost_matrix(conf[vb], anchors.data[vb], gt)
        cols = hungarian(cost)
        assignments.append(cols)
        targets[vb, cols] = 1.0
        for i, c in enumerate(cols):
            flat_idx.append(vb * n_q + int(c))
            flat_gt.append(gt[i])
            weights.append(1.0 / n_f)

    norms = np.array([max(len(a), 1) for a in assignments], dtype=np.float64)
    focal = focal_loss(logits, targets)
    per_video_w = Tensor(np.repeat((1.0 / norms)[:, None], n_q, axis=1))
    cls_term = T.tsum(focal * per_video_w) * (1.0 / b)

    if flat_idx:
        flat_anchor = T.reshape(anchors, (b * n_q, 2))
        matched = T.take(flat_anchor, np.asarray(flat_idx, dtype=np.int64), axis=0)
        gt_arr = np.stack(flat_gt)
        w = Tensor(np.asarray(weights) / b)
        l1_rows = T.tsum(T.absolute(matched - Tensor(gt_arr)), axis=-1)
        l1_term = T.tsum(l1_rows * w)
        giou = giou_1d_t(matched, gt_arr)
        iou_term = T.tsum((Tensor(np.ones_like(giou.data)) - giou) * w)
    else:
        l1_term = Tensor(0.0)
        iou_term = Tensor(0.0)

    loss = cls_term * W_CLS + l1_term * W_L1 + iou_term * W_IOU
    comps = {
        "focal": float(cls_term.data),
        "l1": float(l1_term.data),
        "iou": float(iou_term.data),
    }
    return MatchResult(loss, assignments, comps)


def video_bce(video_logit: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logit) against {0,1} labels."""
    y = np.asarray(labels, dtype=np.float64)
    yt = Tensor(y)
    one = Tensor(np.ones_like(y))
    loss = yt * T.softplus(video_logit * (-1.0)) + (one - yt) * T.softplus(video_logit)
    return T.tmean(loss)


def total_loss(
    match_losses: list[Tensor],
    cls_loss: Tensor,
    enhance_losses: list[Tensor],
    coop_loss: Tensor,
    lam1: float,
    lam2: float,
) -> tuple[Tensor, dict[str, float]]:
    """L = sum_layers L_match + L_cls + lam1 * mean_layers L_enh + lam2 * L_coop.

    Raises on any non-finite component, naming it.
    """
    l_match = match_losses[0]
    for extra in match_losses[1:]:
        l_match = l_match + extra
    if enhance_losses:
        l_enh = enhance_losses[0]
        for extra in enhance_losses[1:]:
            l_enh = l_enh + extra
        l_enh = l_enh * (1.0 / len(enhance_losses))
    else:
        l_enh = Tensor(0.0)
    comps = {
        "match": float(l_match.data),
        "cls": float(cls_loss.data),
        "enhance": float(l_enh.data),
        "coop": float(coop_loss.data),
    }
    for name, val in comps.items():
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss component: {name}={val}")
    total = l_match + cls_loss + l_enh * lam1 + coop_loss * lam2
    comps["total"] = float(total.data)
    return total, comps
