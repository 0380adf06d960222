"""Deformable self-scanning: temporal reference points, offset prediction,
multi-scale bilinear sampling, and the deformable-self SSM block.

Positions are normalized times in (0, 1]; level l covers the sequence at
stride omega * 2^(l-1) frames per token. Offsets are additive in normalized
time. Sampling clamps out-of-range positions to the valid (non-padded)
extent of each level rather than wrapping or zero-padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import FFN, LayerNorm, MLP, Module
from .relay import RelayBank, insert_relay, insertion_map, strip_relay
from .ssm import FBSSM
from .tensor import Tensor, make_node

# Fractional indices this close to a grid point collapse onto it, keeping the
# exact-retrieval contract immune to round-trip float error in p <-> index.
SNAP = 1e-9


@dataclass(frozen=True)
class ReferenceGrid:
    """Precomputed normalized reference points p_n^l per pyramid level.

    ``valid`` counts tokens whose reference lies within the true duration;
    right-padded tokens (p > 1) are excluded as sampling targets.
    """

    points: tuple[np.ndarray, ...]
    valid: tuple[int, ...]
    omega: float
    fps: float
    duration: float

    @property
    def levels(self) -> int:
        return len(self.points)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.points)

    @property
    def total_tokens(self) -> int:
        return sum(self.sizes)

    def stride(self, level: int) -> float:
        """Frames per token at 1-based ``level``."""
        return self.omega * float(2 ** (level - 1))

    def flat_points(self) -> np.ndarray:
        return np.concatenate(self.points)

    def level_starts(self) -> tuple[int, ...]:
        starts, acc = [], 0
        for size in self.sizes:
            starts.append(acc)
            acc += size
        return tuple(starts)

    def frac_index_scale(self, level: int) -> float:
        """u = p * frac_index_scale(level) - 0.5 maps time to level index."""
        return (self.fps * self.duration) / self.stride(level)


def reference_points(
    n_1: int, levels: int, omega: float, fps: float, duration: float
) -> ReferenceGrid:
    """Grid of p_n^l = omega * 2^(l-1) * (n + 0.5) / (fps * duration).

    ``n_1`` is the (possibly padded) level-1 length; ``fps * duration`` is the
    true frame count, so padded tokens land at p > 1 and are flagged invalid.
    """
    if omega <= 0 or fps <= 0 or duration <= 0:
        raise ValueError("omega, fps, duration must be positive")
    if n_1 < 2 ** (levels - 1):
        raise ValueError(f"N_1={n_1} supports fewer than {levels} levels")
    frames = fps * duration
    pts, valid = [], []
    size = n_1
    for level in range(1, levels + 1):
        if size < 1:
            raise ValueError(f"level {level} has zero tokens")
        stride = omega * float(2 ** (level - 1))
        p = stride * (np.arange(size, dtype=np.float64) + 0.5) / frames
        pts.append(p)
        valid.append(int(np.count_nonzero(p <= 1.0 + 1e-12)))
        if level < levels:
            if size % 2 != 0:
                raise ValueError(
                    f"level {level} length {size} is odd; pad N_1 to a multiple "
                    f"of 2^(L-1) first"
                )
            size //= 2
    return ReferenceGrid(tuple(pts), tuple(valid), float(omega), float(fps), float(duration))


def linear_sample(feats: Tensor, u: Tensor, valid: int) -> Tensor:
    """Fused 1-D interpolation: feats (B, N, C), u (B, Q) fractional indices
    clamped to [0, valid-1] -> (B, Q, C). Gradients flow to both features and
    positions (zero position-slope in clamped regions)."""
    b, n, c = feats.data.shape
    if valid < 1 or valid > n:
        raise ValueError(f"valid={valid} out of range for N={n}")
    hi = valid - 1
    if not np.all(np.isfinite(u.data)):
        # NaN survives clipping and would turn into a garbage gather index;
        # raise the same signal the training loop treats as a diverged run
        raise FloatingPointError("non-finite sampling positions")
    uc = np.clip(u.data, 0.0, float(hi))
    i0 = np.floor(uc).astype(np.int64)
    np.minimum(i0, max(hi - 1, 0), out=i0)
    w = uc - i0
    w[w < SNAP] = 0.0
    snap_up = w > 1.0 - SNAP
    i0[snap_up] += 1
    w[snap_up] = 0.0
    i1 = np.minimum(i0 + 1, hi)
    rows = np.arange(b)[:, None]
    lin0 = (rows * n + i0).reshape(-1)
    lin1 = (rows * n + i1).reshape(-1)
    flat = feats.data.reshape(b * n, c)
    f0 = flat[lin0].reshape(i0.shape + (c,))
    f1 = flat[lin1].reshape(i0.shape + (c,))
    wq = w[..., None]
    out = (1.0 - wq) * f0 + wq * f1
    in_range = (u.data >= 0.0) & (u.data <= float(hi))

    def vjp(g: np.ndarray):
        # bincount over flattened (row, channel) indices: deterministic
        # scatter-add, much faster than np.add.at on one core
        idx = np.concatenate([lin0, lin1])
        full = (idx[:, None] * c + np.arange(c)).reshape(-1)
        vals = np.concatenate(
            [((1.0 - wq) * g).reshape(-1, c), (wq * g).reshape(-1, c)]
        ).reshape(-1)
        gf = np.bincount(full, weights=vals, minlength=b * n * c).reshape(b, n, c)
        gu = ((f1 - f0) * g).sum(axis=-1) * in_range
        return gf, gu

    return make_node(out, (feats, u), vjp)


def bilinear_sample(phat: float, feats: Tensor, grid: ReferenceGrid, level: int) -> Tensor:
    """Single-position convenience wrapper: normalized time -> (C,) feature."""
    u = Tensor(np.array([[phat]], dtype=np.float64)) * grid.frac_index_scale(level) - 0.5
    feats3 = T.reshape(feats, (1,) + feats.data.shape)
    out = linear_sample(feats3, u, grid.valid[level - 1])
    return T.reshape(out, (feats.data.shape[-1],))


def predict_offsets(f: Tensor, head: MLP, levels: int, n_s: int) -> Tensor:
    """o = MLP(f), reshaped to (..., L, N_s); no output activation."""
    o = head(f)
    if o.data.shape[-1] != levels * n_s:
        raise ValueError(
            f"offset head emits {o.data.shape[-1]} values, expected {levels * n_s}"
        )
    return T.reshape(o, o.data.shape[:-1] + (levels, n_s))


def split_levels(x: Tensor, grid: ReferenceGrid) -> list[Tensor]:
    """Slice a level-major flattened (B, total, C) sequence into levels."""
    out = []
    for start, size in zip(grid.level_starts(), grid.sizes):
        out.append(T.narrow(x, 1, start, size))
    return out


def deformable_self_scan(
    tokens: Tensor,
    level_feats: list[Tensor],
    grid: ReferenceGrid,
    head1: MLP,
    head2: MLP,
    n_s: int,
) -> Tensor:
    """Resample every token: offsets from head1, L*N_s bilinear samples around
    the token's reference point (level l sampled at column l), aggregated by
    head2 back to C dims. tokens (B, total, C) -> (B, total, C)."""
    b, total, c = tokens.data.shape
    L = grid.levels
    offsets = predict_offsets(tokens, head1, L, n_s)
    p = Tensor(grid.flat_points().reshape(1, total, 1, 1))
    phat = T.expand_to(p, (b, total, L, n_s)) + offsets
    per_level = []
    for level in range(1, L + 1):
        pos = T.narrow(phat, 2, level - 1, 1)
        u = T.reshape(pos, (b, total * n_s)) * grid.frac_index_scale(level) - 0.5
        samp = linear_sample(level_feats[level - 1], u, grid.valid[level - 1])
        per_level.append(T.reshape(samp, (b, total, 1, n_s * c)))
    stacked = T.concat(per_level, axis=2)
    flat = T.reshape(stacked, (b, total, L * n_s * c))
    return head2(flat)


class DSSSMBlock(Module):
    """Deformable self-scan -> relay insertion -> FB-SSM -> strip, wrapped in
    a residual from the block input, then a pre-norm FFN (hidden 4C) residual.
    """

    def __init__(self, rng: np.random.Generator, dim: int, levels: int, n_s: int, state_dim: int):
        self.norm1 = LayerNorm(dim)
        self.head1 = MLP(rng, [dim, dim, levels * n_s], zero_last=True)
        self.head2 = MLP(rng, [levels * n_s * dim, dim, dim])
        self.fb = FBSSM(rng, dim, state_dim)
        self.norm2 = LayerNorm(dim)
        self.ffn = FFN(rng, dim, 4 * dim)
        self.n_s = n_s

    def scan_sequence(
        self, x: Tensor, grid: ReferenceGrid, bank: RelayBank | None
    ):
        """The exact sequence the FB-SSM consumes: deformably resampled tokens
        with relay tokens inserted (when configured). Used by the forward pass
        and by hidden-attention visualization."""
        z = self.norm1(x)
        levels = split_levels(z, grid)
        f = deformable_self_scan(z, levels, grid, self.head1, self.head2, self.n_s)
        if bank is not None and bank.n_r > 0:
            return insert_relay(f, bank)
        return f, insertion_map(f.data.shape[1], 0)

    def __call__(
        self, x: Tensor, grid: ReferenceGrid, bank: RelayBank | None
    ) -> tuple[Tensor, Tensor | None, Tensor | None, object]:
        """Returns (block output, relay post-scan outputs, token post-scan
        outputs, insertion map); the relay entries are None when no relay
        tokens are configured."""
        aug, imap = self.scan_sequence(x, grid, bank)
        if imap.n_r > 0:
            scanned = self.fb(aug)
            seq, relay_out = strip_relay(scanned, imap)
        else:
            seq = self.fb(aug)
            relay_out = None
        h = x + seq
        out = h + self.ffn(self.norm2(h))
        return out, relay_out, (seq if relay_out is not None else None), imap


class VanillaSSMBlock(Module):
    """Plain FB-SSM over the unmodified sequence; no resampling, no relays."""

    def __init__(self, rng: np.random.Generator, dim: int, state_dim: int):
        self.norm1 = LayerNorm(dim)
        self.fb = FBSSM(rng, dim, state_dim)
        self.norm2 = LayerNorm(dim)
        self.ffn = FFN(rng, dim, 4 * dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = x + self.fb(self.norm1(x))
        return h + self.ffn(self.norm2(h))
