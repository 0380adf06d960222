"""Attention components: multi-head attention over queries (with anchor
positional embeddings), deformable self/cross attention over the pyramid,
and the dense blocks used by the all-attention baseline configuration.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .deform import ReferenceGrid, linear_sample, split_levels
from .nn import Linear, Module
from .tensor import Tensor


def sinusoidal_embedding(values: np.ndarray, dim: int) -> np.ndarray:
    """10000-base sin/cos features of scalar positions: (...,) -> (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = values[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def anchor_embedding(anchors: np.ndarray, dim: int) -> np.ndarray:
    """(..., 2) anchors -> (..., dim): t and d sinusoids, dim/2 each."""
    if dim % 4 != 0:
        raise ValueError("anchor embedding needs dim divisible by 4")
    t = sinusoidal_embedding(anchors[..., 0], dim // 2)
    d = sinusoidal_embedding(anchors[..., 1], dim // 2)
    return np.concatenate([t, d], axis=-1)


def sinusoidal_embedding_t(values: Tensor, dim: int) -> Tensor:
    """Autodiff twin of sinusoidal_embedding, for positions that carry
    gradients (refined anchors)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    shape = values.data.shape + (half,)
    wide = T.expand_to(T.reshape(values, values.data.shape + (1,)), shape)
    angles = wide * Tensor(np.broadcast_to(freqs, shape).copy())
    return T.concat([T.sin(angles), T.cos(angles)], axis=len(shape) - 1)


def anchor_embedding_t(anchors: Tensor, dim: int) -> Tensor:
    """Autodiff twin of anchor_embedding for (..., 2) anchor tensors."""
    if dim % 4 != 0:
        raise ValueError("anchor embedding needs dim divisible by 4")
    lead = anchors.data.shape[:-1]
    t = T.reshape(T.narrow(anchors, -1, 0, 1), lead)
    d = T.reshape(T.narrow(anchors, -1, 1, 1), lead)
    return T.concat(
        [sinusoidal_embedding_t(t, dim // 2), sinusoidal_embedding_t(d, dim // 2)],
        axis=len(lead),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.data.shape
    return T.transpose(T.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.data.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class MultiheadAttention(Module):
    """Scaled dot-product attention; positional terms enter q/k only."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads != 0:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.pos_proj = Linear(rng, dim, dim)
        self.heads = heads
        self.dim = dim

    def __call__(
        self,
        query_in: Tensor,
        key_in: Tensor,
        value_in: Tensor,
        q_pos: Tensor | np.ndarray | None,
        k_pos: Tensor | np.ndarray | None,
    ) -> Tensor:
        dh = self.dim // self.heads
        if q_pos is not None and not isinstance(q_pos, Tensor):
            q_pos = Tensor(q_pos)
        if k_pos is not None and not isinstance(k_pos, Tensor):
            k_pos = Tensor(k_pos)
        q_base = query_in + self.pos_proj(q_pos) if q_pos is not None else query_in
        k_base = key_in + self.pos_proj(k_pos) if k_pos is not None else key_in
        q = _split_heads(self.wq(q_base), self.heads)
        k = _split_heads(self.wk(k_base), self.heads)
        v = _split_heads(self.wv(value_in), self.heads)
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        return self.wo(_merge_heads(attn @ v))


class MHSA(Module):
    """Inter-query self-attention with anchor-based positional embeddings."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.attn = MultiheadAttention(rng, dim, heads)
        self.dim = dim

    def __call__(self, queries: Tensor, anchors: Tensor | np.ndarray) -> Tensor:
        if not isinstance(anchors, Tensor):
            anchors = Tensor(np.asarray(anchors, dtype=np.float64))
        pos = anchor_embedding_t(anchors, self.dim)
        return self.attn(queries, queries, queries, pos, pos)


class DeformableAttentionCore(Module):
    """Shared machinery: per head, K sampling points and K logits per level,
    softmax jointly over the L*K points, weighted sum of bilinear samples of
    the (head-split) value projection, then an output projection.

    Offset and logit heads start at zero: sampling begins at the reference
    positions with uniform weights.
    """

    def __init__(self, rng: np.random.Generator, dim: int, levels: int, k_points: int, heads: int):
        if dim % heads != 0:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.w_v = Linear(rng, dim, dim)
        self.w_o = Linear(rng, dim, dim)
        self.off_head = Linear(rng, dim, heads * levels * k_points, zero_init=True)
        self.logit_head = Linear(rng, dim, heads * levels * k_points, zero_init=True)
        self.dim = dim
        self.levels = levels
        self.k = k_points
        self.heads = heads

    def offsets(self, driver: Tensor) -> Tensor:
        b, n, _ = driver.data.shape
        o = self.off_head(driver)
        return T.reshape(o, (b, n, self.heads, self.levels, self.k))

    def weights(self, driver: Tensor) -> Tensor:
        b, n, _ = driver.data.shape
        logits = T.reshape(
            self.logit_head(driver), (b, n, self.heads, self.levels * self.k)
        )
        return T.softmax(logits, axis=-1)

    def attend(self, driver: Tensor, positions: Tensor, values: Tensor, grid: ReferenceGrid) -> Tensor:
        """driver (B, N, C) predicts the weights; positions (B, N, H, L, K)
        are normalized times; values (B, total, C) is the sampled sequence."""
        b, n, _ = driver.data.shape
        dh = self.dim // self.heads
        w = self.weights(driver)
        v_levels = split_levels(self.w_v(values), grid)
        head_outs = []
        for h in range(self.heads):
            acc = None
            for level in range(1, self.levels + 1):
                v_lh = T.narrow(v_levels[level - 1], 2, h * dh, dh)
                pos = T.narrow(T.narrow(positions, 2, h, 1), 3, level - 1, 1)
                u = T.reshape(pos, (b, n * self.k)) * grid.frac_index_scale(level) - 0.5
                samp = T.reshape(
                    linear_sample(v_lh, u, grid.valid[level - 1]), (b, n, self.k, dh)
                )
                w_lh = T.narrow(T.narrow(w, 2, h, 1), 3, (level - 1) * self.k, self.k)
                w_e = T.expand_to(T.reshape(w_lh, (b, n, self.k, 1)), (b, n, self.k, dh))
                contrib = T.tsum(samp * w_e, axis=2)
                acc = contrib if acc is None else acc + contrib
            head_outs.append(acc)
        return self.w_o(T.concat(head_outs, axis=-1))


class DeformableSelfAttention(Module):
    """Pre-norm residual block: tokens attend to sparse locations around
    their own reference points."""

    def __init__(self, rng: np.random.Generator, dim: int, levels: int, k_points: int, heads: int):
        from .nn import LayerNorm

        self.norm = LayerNorm(dim)
        self.core = DeformableAttentionCore(rng, dim, levels, k_points, heads)

    def __call__(self, x: Tensor, grid: ReferenceGrid) -> Tensor:
        b, n, _ = x.data.shape
        z = self.norm(x)
        core = self.core
        o = core.offsets(z)
        p = Tensor(grid.flat_points().reshape(1, n, 1, 1, 1))
        positions = T.expand_to(p, o.data.shape) + o
        return x + core.attend(z, positions, z, grid)


class DeformableCrossAttention(Module):
    """Pre-norm residual block: queries attend to sparse anchor-relative
    locations in the encoder output (p = t + o * d / 2)."""

    def __init__(self, rng: np.random.Generator, dim: int, levels: int, k_points: int, heads: int):
        from .nn import LayerNorm

        self.norm = LayerNorm(dim)
        self.core = DeformableAttentionCore(rng, dim, levels, k_points, heads)

    def __call__(self, q: Tensor, anchors: Tensor, xe: Tensor, grid: ReferenceGrid) -> Tensor:
        b, nq, _ = q.data.shape
        z = self.norm(q)
        core = self.core
        o = core.offsets(z)
        t = T.narrow(anchors, -1, 0, 1)
        d = T.narrow(anchors, -1, 1, 1)
        t = T.expand_to(T.reshape(t, (b, nq, 1, 1, 1)), o.data.shape)
        d = T.expand_to(T.reshape(d, (b, nq, 1, 1, 1)), o.data.shape)
        positions = t + o * d * 0.5
        return q + core.attend(z, positions, xe, grid)


def token_anchors(grid: ReferenceGrid) -> np.ndarray:
    """(time, extent) pairs for every pyramid token, for dense positional
    embeddings: the reference point and the level stride in normalized time."""
    frames = grid.fps * grid.duration
    parts = []
    for level in range(1, grid.levels + 1):
        p = grid.points[level - 1]
        extent = np.full_like(p, grid.stride(level) / frames)
        parts.append(np.stack([p, extent], axis=-1))
    return np.concatenate(parts, axis=0)


class DenseSelfAttentionBlock(Module):
    """Full token-token attention over the flattened pyramid (the quadratic
    baseline)."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        from .nn import LayerNorm

        self.norm = LayerNorm(dim)
        self.attn = MultiheadAttention(rng, dim, heads)
        self.dim = dim

    def __call__(self, x: Tensor, grid: ReferenceGrid) -> Tensor:
        b, n, _ = x.data.shape
        pos = anchor_embedding(token_anchors(grid), self.dim)
        pos = np.broadcast_to(pos, (b, n, self.dim)).copy()
        z = self.norm(x)
        return x + self.attn(z, z, z, pos, pos)


class DenseCrossAttentionBlock(Module):
    """Queries attend densely to every encoder token (baseline counterpart
    of the deformable cross readout)."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        from .nn import LayerNorm

        self.norm = LayerNorm(dim)
        self.attn = MultiheadAttention(rng, dim, heads)
        self.dim = dim

    def __call__(self, q: Tensor, anchors: Tensor, xe: Tensor, grid: ReferenceGrid) -> Tensor:
        b, nq, _ = q.data.shape
        n = xe.data.shape[1]
        q_pos = anchor_embedding_t(anchors, self.dim)
        k_pos = anchor_embedding(token_anchors(grid), self.dim)
        k_pos = np.broadcast_to(k_pos, (b, n, self.dim)).copy()
        z = self.norm(q)
        return q + self.attn(z, xe, xe, q_pos, k_pos)
