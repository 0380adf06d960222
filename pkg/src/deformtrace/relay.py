"""Relay tokens: learnable global tokens evenly inserted into the scan
sequence, partitioning it into subspaces, plus the enhance and cooperation
losses that train them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class RelayBank(Module):
    """n_r learnable C-dim tokens plus the gamma target for cooperation."""

    def __init__(self, rng: np.random.Generator, n_r: int, dim: int, gamma: float = 1.0):
        if n_r < 0:
            raise ValueError("n_r must be >= 0")
        self.tokens = Tensor(T.uniform_init(rng, (n_r, dim), fan_in=dim), requires_grad=True)
        self.n_r = n_r
        self.dim = dim
        self.gamma = gamma


@dataclass(frozen=True)
class InsertionMap:
    """Bookkeeping for one insertion: relay indices in the augmented sequence
    and the [start, end) bounds of each original-token segment."""

    length: int
    positions: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]

    @property
    def n_r(self) -> int:
        return len(self.positions)

    def token_indices(self) -> np.ndarray:
        """Augmented-sequence indices of the original tokens, in order."""
        mask = np.ones(self.length + self.n_r, dtype=bool)
        mask[list(self.positions)] = False
        return np.nonzero(mask)[0]


def insertion_map(length: int, n_r: int) -> InsertionMap:
    """Relay k goes after the k-th of n_r+1 near-equal segments.

    Segment sizes are floor or ceil of length/(n_r+1), longer ones first.
    """
    if length < 1:
        raise ValueError("sequence must be nonempty")
    parts = n_r + 1
    base, rem = divmod(length, parts)
    sizes = [base + 1 if i < rem else base for i in range(parts)]
    segments = []
    start = 0
    for size in sizes:
        segments.append((start, start + size))
        start += size
    positions = []
    consumed = 0
    for k in range(n_r):
        consumed += sizes[k]
        positions.append(consumed + k)
    return InsertionMap(length, tuple(positions), tuple(segments))


def insert_relay(x: Tensor, bank: RelayBank) -> tuple[Tensor, InsertionMap]:
    """Insert bank tokens into (B, T, C) or (T, C); returns the augmented
    sequence and the map needed to strip it again."""
    squeeze = x.data.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.data.shape)
    b, length, dim = x.data.shape
    imap = insertion_map(length, bank.n_r)
    if bank.n_r == 0:
        out = T.reshape(x, (length, dim)) if squeeze else x
        return out, imap
    pieces = []
    for k, (start, end) in enumerate(imap.segments):
        if end > start:
            pieces.append(T.narrow(x, 1, start, end - start))
        if k < bank.n_r:
            token = T.reshape(T.narrow(bank.tokens, 0, k, 1), (1, 1, dim))
            pieces.append(T.expand_to(token, (b, 1, dim)))
    aug = T.concat(pieces, axis=1)
    if squeeze:
        aug = T.reshape(aug, aug.data.shape[1:])
    return aug, imap


def strip_relay(augmented_out: Tensor, imap: InsertionMap) -> tuple[Tensor, Tensor]:
    """Split scan outputs back into (original-order tokens, relay outputs)."""
    squeeze = augmented_out.data.ndim == 2
    if squeeze:
        augmented_out = T.reshape(augmented_out, (1,) + augmented_out.data.shape)
    expected = imap.length + imap.n_r
    if augmented_out.data.shape[1] != expected:
        raise ValueError(
            f"augmented length {augmented_out.data.shape[1]} != map length {expected}"
        )
    seq = T.take(augmented_out, imap.token_indices(), axis=1)
    if imap.n_r > 0:
        relay = T.take(augmented_out, np.asarray(imap.positions), axis=1)
    else:
        relay = T.narrow(augmented_out, 1, 0, 0)
    if squeeze:
        seq = T.reshape(seq, seq.data.shape[1:])
        relay = T.reshape(relay, relay.data.shape[1:])
    return seq, relay


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine over the last axis with 1e-12 norm floors; keeps leading axes."""
    dot = T.tsum(a * b, axis=-1)
    na = T.clamp_min(T.sqrt(T.tsum(a * a, axis=-1)), NORM_FLOOR)
    nb = T.clamp_min(T.sqrt(T.tsum(b * b, axis=-1)), NORM_FLOOR)
    return dot / (na * nb)


def enhance_loss(relay_out: Tensor, seq_out: Tensor, imap: InsertionMap) -> Tensor:
    """-(1/N_r) sum_k cos(relay_k, mean of adjacent post-scan tokens).

    Relay k sits between segments k and k+1; the target is the pooled mean
    over both (one side only when the other segment is empty; a relay with
    no nonempty neighbor is skipped).
    """
    if imap.n_r == 0:
        log.warning("enhance_loss called with N_r=0; returning 0")
        return Tensor(0.0)
    squeeze = relay_out.data.ndim == 2
    if squeeze:
        relay_out = T.reshape(relay_out, (1,) + relay_out.data.shape)
        seq_out = T.reshape(seq_out, (1,) + seq_out.data.shape)
    cosines = []
    for k in range(imap.n_r):
        start = imap.segments[k][0]
        end = imap.segments[k + 1][1]
        if end <= start:
            continue
        window = T.narrow(seq_out, 1, start, end - start)
        target = T.tmean(window, axis=1)
        rk = T.reshape(T.narrow(relay_out, 1, k, 1), target.data.shape)
        cosines.append(_cosine(rk, target))
    if not cosines:
        log.warning("enhance_loss: every relay lacks nonempty neighbors; returning 0")
        return Tensor(0.0)
    stacked = T.concat([T.reshape(c, (1,) + c.data.shape) for c in cosines], axis=0)
    return -T.tmean(stacked)


def cooperation_loss(bank: RelayBank) -> Tensor:
    """||G - gamma*I||^2 with G the raw inner products of the relay tokens."""
    if bank.n_r == 0:
        log.warning("cooperation_loss called with N_r=0; returning 0")
        return Tensor(0.0)
    gram = bank.tokens @ T.transpose(bank.tokens)
    target = Tensor(bank.gamma * np.eye(bank.n_r))
    diff = gram - target
    return T.tsum(diff * diff)
