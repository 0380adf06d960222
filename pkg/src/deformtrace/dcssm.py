"""Deformable Cross-SSM: each decoder query samples anchor-relative features
from the encoder output, appends a learnable empty token, and reads out the
final state of a forward scan. Query subspaces never interact here.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .deform import ReferenceGrid, linear_sample, predict_offsets
from .nn import FFN, LayerNorm, MLP, Module
from .ssm import SSMDirection, scan_final_state, selective_scan
from .tensor import Tensor


def query_sample_points(anchor: Tensor, offsets: Tensor) -> Tensor:
    """p = t + o * d / 2: anchor (..., 2), offsets (..., L, N_s) -> positions.

    Offsets are in units of half-durations, so o = +-1 lands on the segment
    endpoints and larger magnitudes reach outside the anchor.
    """
    shape = offsets.data.shape
    t = T.narrow(anchor, -1, 0, 1)
    d = T.narrow(anchor, -1, 1, 1)
    t = T.expand_to(T.reshape(t, t.data.shape + (1,)), shape)
    d = T.expand_to(T.reshape(d, d.data.shape + (1,)), shape)
    return t + offsets * d * 0.5


class DCSSMBlock(Module):
    """Per-query deformable sampling plus forward-scan readout.

    Flatten order is scale-major by default (level 1 samples first, ascending
    offset column inside a level) with the empty token last, so local fine
    evidence is least decayed at readout. ``offset_major`` flips the nesting.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        levels: int,
        n_s: int,
        state_dim: int,
        flatten: str = "scale_major",
    ):
        if flatten not in ("scale_major", "offset_major"):
            raise ValueError(f"unknown flatten order '{flatten}'")
        self.norm_q = LayerNorm(dim)
        self.off_head = MLP(rng, [dim, dim, levels * n_s], zero_last=True)
        self.empty = Tensor(T.uniform_init(rng, (dim,), fan_in=dim), requires_grad=True)
        self.scan = SSMDirection(rng, dim, state_dim)
        self.norm_r = LayerNorm(dim)
        self.ffn = FFN(rng, dim, 2 * dim)
        self.levels = levels
        self.n_s = n_s
        self.flatten = flatten

    def sample_sequence(
        self,
        q: Tensor,
        anchors: Tensor,
        level_feats: list[Tensor],
        grid: ReferenceGrid,
        empty: Tensor | None = None,
    ) -> Tensor:
        """(B, N_q, C) queries -> (B*N_q, L*N_s + 1, C) scan inputs."""
        b, nq, c = q.data.shape
        qn = self.norm_q(q)
        offsets = predict_offsets(qn, self.off_head, self.levels, self.n_s)
        pos = query_sample_points(anchors, offsets)
        per_level = []
        for level in range(1, self.levels + 1):
            p_l = T.narrow(pos, 2, level - 1, 1)
            u = T.reshape(p_l, (b, nq * self.n_s)) * grid.frac_index_scale(level) - 0.5
            samp = linear_sample(level_feats[level - 1], u, grid.valid[level - 1])
            per_level.append(T.reshape(samp, (b, nq, 1, self.n_s, c)))
        stacked = T.concat(per_level, axis=2)  # (B, N_q, L, N_s, C)
        if self.flatten == "offset_major":
            stacked = T.transpose(stacked, (0, 1, 3, 2, 4))
        seq = T.reshape(stacked, (b, nq, self.levels * self.n_s, c))
        e = self.empty if empty is None else empty
        e = T.expand_to(T.reshape(e, (1, 1, 1, c)), (b, nq, 1, c))
        seq = T.concat([seq, e], axis=2)
        return T.reshape(seq, (b * nq, self.levels * self.n_s + 1, c))

    def readout(
        self,
        q: Tensor,
        anchors: Tensor,
        level_feats: list[Tensor],
        grid: ReferenceGrid,
        empty: Tensor | None = None,
    ) -> Tensor:
        """Final-position scan output per query: (B, N_q, C)."""
        b, nq, c = q.data.shape
        seq = self.sample_sequence(q, anchors, level_feats, grid, empty)
        y = selective_scan(seq, self.scan, "forward")
        last = T.narrow(y, 1, y.data.shape[1] - 1, 1)
        return T.reshape(last, (b, nq, c))

    def __call__(
        self,
        q: Tensor,
        anchors: Tensor,
        level_feats: list[Tensor],
        grid: ReferenceGrid,
        empty: Tensor | None = None,
    ) -> Tensor:
        r = self.readout(q, anchors, level_feats, grid, empty)
        return q + self.ffn(self.norm_r(r))


class VanillaCrossBlock(Module):
    """Non-deformable readout: forward-scan the whole encoder sequence once,
    then advance the recurrence one step per query (the query embedding is
    the final scan token). Identical to scanning sequence+query per query,
    but the prefix is shared."""

    def __init__(self, rng: np.random.Generator, dim: int, state_dim: int):
        self.norm_q = LayerNorm(dim)
        self.scan = SSMDirection(rng, dim, state_dim)
        self.norm_r = LayerNorm(dim)
        self.ffn = FFN(rng, dim, 2 * dim)
        self.dim = dim

    def readout(self, q: Tensor, xe_flat: Tensor) -> Tensor:
        b, nq, c = q.data.shape
        s = self.scan.state_dim
        qn = self.norm_q(q)
        h_t = scan_final_state(xe_flat, self.scan)  # (B, C, S)
        delta, bg, cg = self.scan.gates(qn)
        A = T.exp(self.scan.a_log)
        a4 = T.expand_to(T.reshape(A, (1, 1, c, s)), (b, nq, c, s))
        d4 = T.expand_to(T.reshape(delta, (b, nq, c, 1)), (b, nq, c, s))
        abar = T.exp(-(d4 * a4))
        h4 = T.expand_to(T.reshape(h_t, (b, 1, c, s)), (b, nq, c, s))
        u4 = T.expand_to(T.reshape(delta * qn, (b, nq, c, 1)), (b, nq, c, s))
        b4 = T.expand_to(T.reshape(bg, (b, nq, 1, s)), (b, nq, c, s))
        h_q = abar * h4 + u4 * b4
        c4 = T.expand_to(T.reshape(cg, (b, nq, 1, s)), (b, nq, c, s))
        return T.tsum(h_q * c4, axis=-1)

    def __call__(self, q: Tensor, xe_flat: Tensor) -> Tensor:
        r = self.readout(q, xe_flat)
        return q + self.ffn(self.norm_r(r))
