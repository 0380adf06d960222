"""Hidden-attention inspection of trained models: per-sample attention
matrices from an encoder layer's scan, off-band interaction mass, and the
PGM export used by the visualize command.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SyntheticSample
from .model import DeformTraceModel
from .ssm import hidden_attention, offband_mass


def encoder_attention(model: DeformTraceModel, sample: SyntheticSample, layer: int = 0):
    """(alpha, relay positions) for one sample: the hidden-attention matrix of
    the chosen encoder layer's forward scan over its actual input sequence."""
    aug, imap = model.encoder_scan_input(sample.seq_v[None], sample.seq_a[None], layer)
    block = model.encoder[layer].self_block
    alpha = hidden_attention(aug, block.fb.fwd)
    return alpha, list(imap.positions)


def offband_fraction(model: DeformTraceModel, sample: SyntheticSample, band: float, layer: int = 0) -> float:
    alpha, _ = encoder_attention(model, sample, layer)
    return offband_mass(alpha, band)


def relay_band(scan_len: int, n_r: int) -> float:
    """Off-band distance threshold: one relay segment of the scan sequence."""
    return scan_len / (n_r + 1)


def save_pgm(alpha: np.ndarray, path: str | Path) -> None:
    """8-bit binary PGM of |alpha|, normalized to the max entry."""
    mag = np.abs(np.asarray(alpha, dtype=np.float64))
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    img = np.round(mag * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    img = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return img.astype(np.float64) / maxval
