"""Synthetic planted-forgery benchmark, the binary feature-file format, and
feature-level robustness perturbations.

Each sample is a pair of per-modality feature sequences built from a random
sinusoid mixture plus white noise; forged spans add a per-sample pattern
vector whose magnitude shrinks as difficulty grows, with linear ramps at the
span boundaries so onsets are ambiguous rather than step-shaped.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DTFV_MAGIC = b"DTFV"
DTFV_VERSION = 1

NOISE_SIGMA = 0.1
N_SINUSOIDS = 4
MAX_SEGMENTS = 3
MIN_DUR_FRAMES = 2
MAX_DUR_FRAMES = 40
PLACEMENT_ATTEMPTS = 100
MODALITIES = ("video", "audio", "both")

# robustness intensities -> additive noise scale
PERTURB_SIGMA = {1: 0.05, 2: 0.1, 3: 0.2, 4: 0.4, 5: 0.8}


@dataclass
class SyntheticSample:
    seq_v: np.ndarray  # (N_1, C_in)
    seq_a: np.ndarray
    segments: np.ndarray  # (N_f, 2) normalized (center, duration)
    label: int
    meta: dict = field(default_factory=dict)


def _base_signal(rng: np.random.Generator, n_1: int, c_in: int) -> np.ndarray:
    t = np.arange(n_1) / n_1
    amp = rng.uniform(0.2, 0.5, size=(N_SINUSOIDS, c_in))
    freq = rng.uniform(0.5, 8.0, size=(N_SINUSOIDS, c_in))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(N_SINUSOIDS, c_in))
    sig = (amp[None] * np.sin(2.0 * np.pi * freq[None] * t[:, None, None] + phase[None])).sum(axis=1)
    return sig + rng.normal(0.0, NOISE_SIGMA, size=(n_1, c_in))


def _ramp_envelope(length: int, ramp: int) -> np.ndarray:
    if ramp <= 0:
        return np.ones(length)
    i = np.arange(length, dtype=np.float64)
    return np.minimum(1.0, np.minimum((i + 1.0) / ramp, (length - i) / ramp))


def generate_sample(
    rng: np.random.Generator,
    n_1: int,
    c_in: int,
    difficulty: float,
    ramp: int = 2,
) -> SyntheticSample:
    seq_v = _base_signal(rng, n_1, c_in)
    seq_a = _base_signal(rng, n_1, c_in)
    pattern = rng.normal(0.0, 1.5 - difficulty, size=c_in)
    n_seg = int(rng.integers(0, MAX_SEGMENTS + 1))
    max_dur = min(MAX_DUR_FRAMES, n_1 // 2)
    placed: list[tuple[int, int]] = []
    for _ in range(n_seg):
        ok = False
        for _attempt in range(PLACEMENT_ATTEMPTS):
            dur = int(rng.integers(MIN_DUR_FRAMES, max_dur + 1))
            start = int(rng.integers(0, n_1 - dur + 1))
            if all(start + dur <= s or e <= start for s, e in placed):
                placed.append((start, start + dur))
                ok = True
                break
        if not ok:
            log.warning("could not place forged segment after %d attempts; skipping", PLACEMENT_ATTEMPTS)
    placed.sort()
    segments = []
    for start, end in placed:
        length = end - start
        env = _ramp_envelope(length, ramp)
        modality = MODALITIES[rng.integers(0, len(MODALITIES))]
        add = env[:, None] * pattern[None, :]
        if modality in ("video", "both"):
            seq_v[start:end] += add
        if modality in ("audio", "both"):
            seq_a[start:end] += add
        segments.append(((start + length / 2.0) / n_1, length / n_1))
    seg_arr = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    return SyntheticSample(
        seq_v=seq_v,
        seq_a=seq_a,
        segments=seg_arr,
        label=int(seg_arr.shape[0] > 0),
        meta={"difficulty": difficulty, "ramp": ramp},
    )


def generate_dataset(
    n_samples: int,
    c_in: int,
    n_1: int,
    difficulty: float,
    seed: int,
    ramp: int = 2,
) -> list[SyntheticSample]:
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    if n_1 < 2 * MIN_DUR_FRAMES:
        raise ValueError(f"N_1={n_1} too short for plantable segments")
    rng = np.random.default_rng(seed)
    return [generate_sample(rng, n_1, c_in, difficulty, ramp) for _ in range(n_samples)]


def perturb_features(
    dataset: list[SyntheticSample], kind: str, intensity: int, seed: int
) -> list[SyntheticSample]:
    """Feature-level robustness stressor; labels and segments unchanged."""
    if kind != "gaussian_noise":
        raise ValueError(f"unknown perturbation kind {kind!r}")
    if intensity not in PERTURB_SIGMA:
        raise ValueError(f"intensity must be one of {sorted(PERTURB_SIGMA)}")
    sigma = PERTURB_SIGMA[intensity]
    rng = np.random.default_rng(seed)
    out = []
    for s in dataset:
        out.append(
            SyntheticSample(
                seq_v=s.seq_v + rng.normal(0.0, sigma, size=s.seq_v.shape),
                seq_a=s.seq_a + rng.normal(0.0, sigma, size=s.seq_a.shape),
                segments=s.segments.copy(),
                label=s.label,
                meta={**s.meta, "perturb": (kind, intensity)},
            )
        )
    return out


def save_features(sample: SyntheticSample, path: str | Path) -> None:
    """Binary feature file plus a JSON annotation sidecar at <path>.json."""
    path = Path(path)
    t, c = sample.seq_v.shape
    if sample.seq_a.shape != (t, c):
        raise ValueError("modalities must share (T, C) shape")
    with open(path, "wb") as fh:
        fh.write(DTFV_MAGIC)
        fh.write(struct.pack("<III", DTFV_VERSION, t, c))
        fh.write(sample.seq_v.astype("<f4").tobytes())
        fh.write(sample.seq_a.astype("<f4").tobytes())
    sidecar = {
        "label": int(sample.label),
        "segments": [
            {"center": float(t0), "duration": float(d0)} for t0, d0 in sample.segments
        ],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar), encoding="utf-8")


def load_features(path: str | Path) -> SyntheticSample:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DTFV_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic {raw[:4]!r})")
    version, t, c = struct.unpack_from("<III", raw, 4)
    if version != DTFV_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    need = 16 + 2 * t * c * 4
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    seq_v = flat[: t * c].reshape(t, c).astype(np.float64)
    seq_a = flat[t * c :].reshape(t, c).astype(np.float64)
    side = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    segments = np.asarray(
        [[s["center"], s["duration"]] for s in side.get("segments", [])],
        dtype=np.float64,
    ).reshape(-1, 2)
    return SyntheticSample(
        seq_v=seq_v,
        seq_a=seq_a,
        segments=segments,
        label=int(side["label"]),
        meta={"path": str(path)},
    )
