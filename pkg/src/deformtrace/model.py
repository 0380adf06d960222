"""End-to-end assembly: modality fusion, temporal pyramid, encoder/decoder
stacks, prediction heads, and the ablation variants that swap state-space
blocks for their dense-attention or non-deformable counterparts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    MHSA,
    DeformableCrossAttention,
    DeformableSelfAttention,
    DenseCrossAttentionBlock,
    DenseSelfAttentionBlock,
)
from .dcssm import DCSSMBlock, VanillaCrossBlock
from .deform import DSSSMBlock, ReferenceGrid, VanillaSSMBlock, reference_points, split_levels
from .matching import ANCHOR_EPS, MatchResult, match_loss, total_loss, video_bce
from .nn import FFN, MLP, LayerNorm, Linear, Module
from .relay import RelayBank, cooperation_loss, enhance_loss
from .tensor import Tensor

VARIANTS = (
    "deformtrace",
    "fullformer",
    "vanilla_ssm",
    "no_dsssm",
    "no_dcssm",
    "no_enh",
    "no_coop",
)

# variants whose encoder keeps the deformable scan (and therefore the relay bank)
_DEFORM_SELF = {"deformtrace", "no_dcssm", "no_enh", "no_coop"}
_DEFORM_CROSS = {"deformtrace", "no_dsssm", "no_enh", "no_coop"}


@dataclass
class ModelConfig:
    c: int = 256
    l: int = 6
    m: int = 3
    n_s: int = 6
    n_q: int = 60
    n_r: int = 8
    lam1: float = 0.5
    lam2: float = 0.2
    variant: str = "deformtrace"
    heads: int = 4
    k_points: int = 0  # 0: use n_s
    state_dim: int = 8
    enc_layers: int = 1
    c_in: int = 8
    fps: float = 25.0
    omega: float = 1.0
    pad_input: bool = True
    dc_flatten: str = "scale_major"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.c % self.heads != 0:
            raise ValueError("heads must divide C")
        if self.c % 4 != 0:
            raise ValueError("C must be divisible by 4 (positional embeddings)")
        for name in ("c", "l", "m", "n_s", "n_q", "heads", "state_dim", "enc_layers", "c_in"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_r < 0:
            raise ValueError("n_r must be >= 0")

    @property
    def k(self) -> int:
        return self.k_points if self.k_points > 0 else self.n_s

    def uses_relay(self) -> bool:
        return self.variant in _DEFORM_SELF and self.n_r > 0

    def effective_lambdas(self) -> tuple[float, float]:
        if not self.uses_relay():
            return 0.0, 0.0
        lam1 = 0.0 if self.variant == "no_enh" else self.lam1
        lam2 = 0.0 if self.variant == "no_coop" else self.lam2
        return lam1, lam2


@dataclass
class Prediction:
    """Final proposals: (t, d) segments with per-query confidence and the
    video-level forgery score."""

    segments: np.ndarray  # (B, N_q, 2)
    confidence: np.ndarray  # (B, N_q)
    video_score: np.ndarray  # (B,)


@dataclass
class ModelOutput:
    prediction: Prediction
    anchors_per_layer: list[Tensor]  # after each decoder layer
    logits_per_layer: list[Tensor]
    video_logit: Tensor
    enhance_terms: list[Tensor]
    coop_term: Tensor
    encoder_out: Tensor
    grid: ReferenceGrid
    extras: dict = field(default_factory=dict)


def pad_to_multiple(x: Tensor, multiple: int) -> Tensor:
    """Right-pad along the time axis by replicating the final step."""
    b, t, c = x.data.shape
    rem = t % multiple
    if rem == 0:
        return x
    pad = multiple - rem
    last = T.narrow(x, 1, t - 1, 1)
    return T.concat([x, T.expand_to(last, (b, pad, c))], axis=1)


def inverse_sigmoid(x: Tensor) -> Tensor:
    one = Tensor(np.ones_like(x.data))
    lo = T.clamp_min(x, ANCHOR_EPS)
    clamped = one - T.clamp_min(one - lo, ANCHOR_EPS)
    return T.log(clamped) - T.log(one - clamped)


def refine_anchors(anchors: Tensor, delta: Tensor) -> Tensor:
    """t' = sigmoid(sigmoid^-1(t) + dt); keeps anchors in (0, 1)."""
    return T.sigmoid(inverse_sigmoid(anchors) + delta)


class PyramidConv(Module):
    """Kernel-3 stride-2 temporal conv (as unfold + linear), then LN + relu."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.lin = Linear(rng, 3 * dim, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.lin(T.unfold3(x))))


def fuse_features(seq_v: Tensor, seq_a: Tensor, proj: Linear) -> Tensor:
    if seq_v.data.shape != seq_a.data.shape:
        raise ValueError(
            f"modality shapes differ: {seq_v.data.shape} vs {seq_a.data.shape}"
        )
    return proj(T.concat([seq_v, seq_a], axis=-1))


def build_pyramid(f1: Tensor, convs: list[PyramidConv]) -> list[Tensor]:
    levels = [f1]
    for i, conv in enumerate(convs):
        cur = levels[-1]
        if cur.data.shape[1] % 2 != 0:
            raise ValueError(
                f"level {i + 1} length {cur.data.shape[1]} is odd; "
                "pad N_1 to a multiple of 2^(L-1) first"
            )
        levels.append(conv(cur))
    return levels


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        c = cfg.c
        if cfg.variant in _DEFORM_SELF:
            self.kind = "deform"
            self.self_block = DSSSMBlock(rng, c, cfg.l, cfg.n_s, cfg.state_dim)
        elif cfg.variant == "fullformer":
            self.kind = "dense"
            self.self_block = DenseSelfAttentionBlock(rng, c, cfg.heads)
        else:
            self.kind = "vanilla"
            self.self_block = VanillaSSMBlock(rng, c, cfg.state_dim)
        self.dsa = DeformableSelfAttention(rng, c, cfg.l, cfg.k, cfg.heads)
        self.norm_f = LayerNorm(c)
        self.ffn = FFN(rng, c, 2 * c)

    def __call__(self, x: Tensor, grid: ReferenceGrid, bank: RelayBank | None):
        relay_parts = None
        if self.kind == "deform":
            x, relay_out, seq_out, imap = self.self_block(x, grid, bank)
            if relay_out is not None:
                relay_parts = (relay_out, seq_out, imap)
        elif self.kind == "dense":
            x = self.self_block(x, grid)
        else:
            x = self.self_block(x)
        x = self.dsa(x, grid)
        x = x + self.ffn(self.norm_f(x))
        return x, relay_parts


class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        c = cfg.c
        if cfg.variant in _DEFORM_CROSS:
            self.kind = "deform"
            self.cross = DCSSMBlock(
                rng, c, cfg.l, cfg.n_s, cfg.state_dim, flatten=cfg.dc_flatten
            )
        elif cfg.variant == "fullformer":
            self.kind = "dense"
            self.cross = DenseCrossAttentionBlock(rng, c, cfg.heads)
        else:
            self.kind = "vanilla"
            self.cross = VanillaCrossBlock(rng, c, cfg.state_dim)
        self.mhsa = MHSA(rng, c, cfg.heads)
        self.norm_m = LayerNorm(c)
        self.dca = DeformableCrossAttention(rng, c, cfg.l, cfg.k, cfg.heads)
        self.norm_f = LayerNorm(c)
        self.ffn = FFN(rng, c, 2 * c)
        self.refine = MLP(rng, [c, c, 2], zero_last=True)

    def __call__(
        self,
        q: Tensor,
        anchors: Tensor,
        xe: Tensor,
        level_feats: list[Tensor],
        grid: ReferenceGrid,
    ) -> tuple[Tensor, Tensor]:
        if self.kind == "deform":
            q = self.cross(q, anchors, level_feats, grid)
        elif self.kind == "dense":
            q = self.cross(q, anchors, xe, grid)
        else:
            q = self.cross(q, xe)
        q = q + self.mhsa(self.norm_m(q), anchors)
        q = self.dca(q, anchors, xe, grid)
        q = q + self.ffn(self.norm_f(q))
        delta = self.refine(q)
        return q, refine_anchors(anchors, delta)


class DeformTraceModel(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        c = cfg.c
        self.v_proj = Linear(rng, cfg.c_in, c)
        self.a_proj = Linear(rng, cfg.c_in, c)
        self.fuse = Linear(rng, 2 * c, c)
        self.pyramid = [PyramidConv(rng, c) for _ in range(cfg.l - 1)]
        self.query_init = MLP(rng, [2 * c, c, c])
        self.anchor_init = MLP(rng, [c, c, 2 * cfg.n_q])
        self.bank = RelayBank(rng, cfg.n_r, c) if cfg.uses_relay() else None
        self.encoder = [EncoderLayer(rng, cfg) for _ in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(rng, cfg) for _ in range(cfg.m)]
        self.cls_head = MLP(rng, [c, c, 1])

    def _grid(self, t_orig: int, t_pad: int) -> ReferenceGrid:
        cfg = self.cfg
        return reference_points(
            t_pad, cfg.l, cfg.omega, cfg.fps, t_orig / cfg.fps
        )

    def _tokens(self, seq_v, seq_a):
        """Shared front half: project, pad, fuse, pyramid, flatten."""
        cfg = self.cfg
        if not isinstance(seq_v, Tensor):
            seq_v = Tensor(np.asarray(seq_v, dtype=np.float64))
        if not isinstance(seq_a, Tensor):
            seq_a = Tensor(np.asarray(seq_a, dtype=np.float64))
        if seq_v.data.ndim == 2:
            seq_v = T.reshape(seq_v, (1,) + seq_v.data.shape)
            seq_a = T.reshape(seq_a, (1,) + seq_a.data.shape)
        if seq_v.data.shape != seq_a.data.shape:
            raise ValueError("modalities must share (B, T, C_in) shape")
        t_orig = seq_v.data.shape[1]

        v = self.v_proj(seq_v)
        a = self.a_proj(seq_a)
        mult = 2 ** (cfg.l - 1)
        if t_orig % mult != 0 and not cfg.pad_input:
            raise ValueError(
                f"N_1={t_orig} not divisible by 2^(L-1)={mult} and padding is disabled"
            )
        v_p = pad_to_multiple(v, mult)
        a_p = pad_to_multiple(a, mult)
        grid = self._grid(t_orig, v_p.data.shape[1])
        f1 = fuse_features(v_p, a_p, self.fuse)
        levels = build_pyramid(f1, self.pyramid)
        x = T.concat(levels, axis=1)
        return x, grid, v, a, f1, t_orig

    def encoder_scan_input(self, seq_v, seq_a, layer: int = 0):
        """The sequence the chosen encoder layer's state-space scan consumes,
        with its insertion map (for hidden-attention inspection)."""
        if not 0 <= layer < len(self.encoder):
            raise ValueError(f"layer must lie in [0, {len(self.encoder) - 1}]")
        x, grid, *_ = self._tokens(seq_v, seq_a)
        for enc in self.encoder[:layer]:
            x, _ = enc(x, grid, self.bank)
        target = self.encoder[layer]
        if target.kind == "deform":
            return target.self_block.scan_sequence(x, grid, self.bank)
        if target.kind == "vanilla":
            from .relay import insertion_map

            z = target.self_block.norm1(x)
            return z, insertion_map(z.data.shape[1], 0)
        raise ValueError("this encoder variant has no state-space scan")

    def forward(self, seq_v, seq_a) -> ModelOutput:
        cfg = self.cfg
        x, grid, v, a, f1, t_orig = self._tokens(seq_v, seq_a)
        b = x.data.shape[0]

        enhance_terms: list[Tensor] = []
        for layer in self.encoder:
            x, relay_parts = layer(x, grid, self.bank)
            if relay_parts is not None:
                enhance_terms.append(enhance_loss(*relay_parts))
        xe = x
        level_feats = split_levels(xe, grid)

        pooled_v = T.tmean(T.narrow(v, 1, 0, t_orig), axis=1)
        pooled_a = T.tmean(T.narrow(a, 1, 0, t_orig), axis=1)
        q_seed = self.query_init(T.concat([pooled_v, pooled_a], axis=-1))
        q = T.expand_to(T.reshape(q_seed, (b, 1, cfg.c)), (b, cfg.n_q, cfg.c))
        f1_mean = T.tmean(T.narrow(f1, 1, 0, t_orig), axis=1)
        anchors = T.sigmoid(T.reshape(self.anchor_init(f1_mean), (b, cfg.n_q, 2)))

        anchors_per_layer: list[Tensor] = []
        logits_per_layer: list[Tensor] = []
        for layer in self.decoder:
            q, anchors = layer(q, anchors, xe, level_feats, grid)
            anchors_per_layer.append(anchors)
            logits_per_layer.append(T.reshape(self.cls_head(q), (b, cfg.n_q)))

        final_logits = logits_per_layer[-1]
        video_logit = T.tmax(final_logits, axis=1)
        with T.no_grad():
            pred = Prediction(
                segments=anchors.data.copy(),
                confidence=T.sigmoid(final_logits).data.copy(),
                video_score=T.sigmoid(video_logit).data.copy(),
            )
        coop = cooperation_loss(self.bank) if self.bank is not None else Tensor(0.0)
        return ModelOutput(
            prediction=pred,
            anchors_per_layer=anchors_per_layer,
            logits_per_layer=logits_per_layer,
            video_logit=video_logit,
            enhance_terms=enhance_terms,
            coop_term=coop,
            encoder_out=xe,
            grid=grid,
        )

    __call__ = forward

    def loss(
        self, out: ModelOutput, gt_segments: list[np.ndarray], labels: np.ndarray
    ) -> tuple[Tensor, dict[str, float], list[MatchResult]]:
        """Total objective with auxiliary matching on every decoder layer."""
        results = [
            match_loss(logits, anchors, gt_segments)
            for logits, anchors in zip(out.logits_per_layer, out.anchors_per_layer)
        ]
        cls = video_bce(out.video_logit, labels)
        lam1, lam2 = self.cfg.effective_lambdas()
        total, comps = total_loss(
            [r.loss for r in results], cls, out.enhance_terms, out.coop_term, lam1, lam2
        )
        return total, comps, results
