"""Selective state-space scan and its hidden-attention analysis view.

The recurrence per channel c and state s is

    h_t = abar_t * h_{t-1} + bbar_t * x_t,      y_t = sum_s cg_t[s] * h_t[c, s]

with input-dependent gates: abar = exp(-delta * A), bbar = delta * B (Euler
rule), delta = softplus(affine(x)) floored at 1e-4, and A = exp(a_log) kept
positive through the log parameterization. Cost is linear in T.

``selective_scan`` runs a fused node (one python loop over T inside a single
graph node, exact adjoint recurrence in the backward pass). ``discretize`` +
``scan_gates`` expose the same math as composable pieces for oracle tests.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor, make_node

DELTA_FLOOR = 1e-4
MAX_ATTENTION_LEN = 4096


class SSMDirection(Module):
    """Gate projections and state decays for one scan direction.

    ``a_log`` has shape (C, S); every channel row starts at log(1..S) so the
    states cover decay rates from slow (A=1) to fast (A=S).
    """

    def __init__(self, rng: np.random.Generator, dim: int, state_dim: int):
        if state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        rows = np.log(np.arange(1, state_dim + 1, dtype=np.float64))
        self.a_log = Tensor(np.tile(rows, (dim, 1)), requires_grad=True)
        self.w_delta = Linear(rng, dim, dim)
        self.w_b = Linear(rng, dim, state_dim)
        self.w_c = Linear(rng, dim, state_dim)
        self.dim = dim
        self.state_dim = state_dim

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent (delta, B, C) gates; delta floored at 1e-4."""
        delta = T.clamp_min(T.softplus(self.w_delta(x)), DELTA_FLOOR)
        return delta, self.w_b(x), self.w_c(x)


def discretize(delta: Tensor, a_log: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Continuous params -> per-step gates: abar = exp(-delta*A), bbar = delta*b.

    delta (..., C), a_log (C, S), b (..., S) -> abar, bbar of shape (..., C, S).
    abar lies in (0, 1) for positive delta; delta -> 0 gives abar -> 1 and
    bbar -> 0 (the no-update limit).
    """
    A = np.exp(a_log.data)
    dxA = delta.data[..., None] * A
    abar_data = np.exp(-dxA)

    def vjp_abar(g: np.ndarray):
        core = g * abar_data
        gdelta = -(core * A).sum(axis=-1)
        lead = tuple(range(core.ndim - 2))
        ga_log = -(core * delta.data[..., None]).sum(axis=lead) * A
        return gdelta, ga_log

    abar = make_node(abar_data, (delta, a_log), vjp_abar)

    bbar_data = delta.data[..., None] * b.data[..., None, :]

    def vjp_bbar(g: np.ndarray):
        gdelta = (g * b.data[..., None, :]).sum(axis=-1)
        gb = (g * delta.data[..., None]).sum(axis=-2)
        return gdelta, gb

    bbar = make_node(bbar_data, (delta, b), vjp_bbar)
    return abar, bbar


def scan_gates(abar: Tensor, bbar: Tensor, cg: Tensor, x: Tensor) -> Tensor:
    """Run the recurrence from explicit gates.

    abar, bbar (B, T, C, S); cg (B, T, S); x (B, T, C) -> (B, T, C).
    Reference path for tests; the production path is ``selective_scan``.
    """
    B, Tlen, C, S = abar.data.shape
    hs = np.zeros((Tlen + 1, B, C, S))
    y = np.empty((B, Tlen, C))
    for t in range(Tlen):
        hs[t + 1] = abar.data[:, t] * hs[t] + bbar.data[:, t] * x.data[:, t, :, None]
        y[:, t] = (hs[t + 1] * cg.data[:, t, None, :]).sum(axis=-1)

    def vjp(g: np.ndarray):
        gabar = np.empty_like(abar.data)
        gbbar = np.empty_like(bbar.data)
        gcg = np.empty_like(cg.data)
        gx = np.empty_like(x.data)
        gh = np.zeros((B, C, S))
        for t in reversed(range(Tlen)):
            gcg[:, t] = (g[:, t, :, None] * hs[t + 1]).sum(axis=1)
            gh = gh + g[:, t, :, None] * cg.data[:, t, None, :]
            gbbar[:, t] = gh * x.data[:, t, :, None]
            gx[:, t] = (gh * bbar.data[:, t]).sum(axis=-1)
            gabar[:, t] = gh * hs[t]
            gh = gh * abar.data[:, t]
        return gabar, gbbar, gcg, gx

    return make_node(y, (abar, bbar, cg, x), vjp)


def _scan_node(x: Tensor, delta: Tensor, bg: Tensor, cg: Tensor, A: Tensor) -> Tensor:
    """Fused selective scan: gates are re-derived from (delta, A) per step.

    x, delta (B, T, C); bg, cg (B, T, S); A (C, S) positive decay rates.
    Gate products are precomputed in bulk so the sequential loop touches only
    the recurrence itself.
    """
    B, Tlen, C = x.data.shape
    S = A.data.shape[1]
    u = delta.data * x.data
    # (T, B, C, S) layouts keep the per-step slices contiguous
    abars = np.exp(
        -delta.data.transpose(1, 0, 2)[..., None] * A.data
    )
    ub = u.transpose(1, 0, 2)[..., None] * bg.data.transpose(1, 0, 2)[:, :, None, :]
    hs = np.empty((Tlen + 1, B, C, S))
    hs[0] = 0.0
    for t in range(Tlen):
        np.multiply(abars[t], hs[t], out=hs[t + 1])
        hs[t + 1] += ub[t]
    y = np.einsum("tbcs,bts->btc", hs[1:], cg.data)

    def vjp(g: np.ndarray):
        # per-step injected cotangent G_t = g_t c_t, accumulated in place:
        # GH[t] = GH[t+1] * abar_{t+1} + G_t
        GH = g.transpose(1, 0, 2)[..., None] * cg.data.transpose(1, 0, 2)[:, :, None, :]
        for t in reversed(range(Tlen - 1)):
            prod = GH[t + 1] * abars[t + 1]
            GH[t] += prod
        gcg = np.einsum("btc,tbcs->bts", g, hs[1:])
        gbg = np.einsum("tbcs,btc->bts", GH, u)
        gu = np.einsum("tbcs,bts->btc", GH, bg.data)
        GH *= hs[:-1]
        GH *= abars
        gdelta = -np.einsum("tbcs,cs->btc", GH, A.data)
        gA = -np.einsum("tbcs,btc->cs", GH, delta.data)
        gx = gu * delta.data
        gdelta += gu * x.data
        return gx, gdelta, gbg, gcg, gA

    return make_node(y, (x, delta, bg, cg, A), vjp)


def scan_final_state(x: Tensor, params: SSMDirection) -> Tensor:
    """Forward-scan a (B, T, C) sequence and return the final hidden state
    (B, C, S). Used to share a common scan prefix across decoder queries."""
    if x.data.ndim != 3:
        raise ValueError(f"scan_final_state expects (B, T, C), got {x.data.shape}")
    delta_t, bg_t, _ = params.gates(x)
    A_t = T.exp(params.a_log)
    B, Tlen, C = x.data.shape
    S = A_t.data.shape[1]
    delta, bg, A = delta_t.data, bg_t.data, A_t.data
    u = delta * x.data
    abars = np.exp(-delta.transpose(1, 0, 2)[..., None] * A)
    ub = u.transpose(1, 0, 2)[..., None] * bg.transpose(1, 0, 2)[:, :, None, :]
    hs = np.empty((Tlen + 1, B, C, S))
    hs[0] = 0.0
    for t in range(Tlen):
        np.multiply(abars[t], hs[t], out=hs[t + 1])
        hs[t + 1] += ub[t]

    def vjp(g: np.ndarray):
        GH = np.empty((Tlen, B, C, S))
        GH[Tlen - 1] = g
        for t in reversed(range(Tlen - 1)):
            np.multiply(GH[t + 1], abars[t + 1], out=GH[t])
        gbg = np.einsum("tbcs,btc->bts", GH, u)
        gu = np.einsum("tbcs,bts->btc", GH, bg)
        GH *= hs[:-1]
        GH *= abars
        gdelta = -np.einsum("tbcs,cs->btc", GH, A)
        gA = -np.einsum("tbcs,btc->cs", GH, delta)
        gx = gu * delta
        gdelta += gu * x.data
        return gx, gdelta, gbg, gA

    return make_node(hs[-1], (x, delta_t, bg_t, A_t), vjp)


def selective_scan(x: Tensor, params: SSMDirection, direction: str = "forward") -> Tensor:
    """Scan a (T, C) or (B, T, C) sequence; backward = reverse, scan, reverse."""
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction '{direction}'")
    squeeze = x.data.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 3:
        raise ValueError(f"selective_scan expects (B, T, C), got {x.data.shape}")
    if x.data.shape[1] < 1:
        raise ValueError("selective_scan needs at least one timestep")
    if x.data.shape[2] != params.dim:
        raise ValueError(f"channel mismatch: {x.data.shape[2]} vs {params.dim}")
    if direction == "backward":
        x = T.flip(x, axis=1)
    delta, bg, cg = params.gates(x)
    A = T.exp(params.a_log)
    y = _scan_node(x, delta, bg, cg, A)
    if direction == "backward":
        y = T.flip(y, axis=1)
    if squeeze:
        y = T.reshape(y, y.data.shape[1:])
    return y


class FBSSM(Module):
    """Forward and backward scans, summed and linearly projected."""

    def __init__(self, rng: np.random.Generator, dim: int, state_dim: int):
        self.fwd = SSMDirection(rng, dim, state_dim)
        self.bwd = SSMDirection(rng, dim, state_dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(
            selective_scan(x, self.fwd, "forward")
            + selective_scan(x, self.bwd, "backward")
        )


def hidden_attention(
    x: np.ndarray, params: SSMDirection, per_channel: bool = False
) -> np.ndarray:
    """Data-dependent attention weights realized by the forward scan.

    alpha[t, s] (channel mean, or alpha[c, t, s] with ``per_channel``) is the
    weight the scan output at step t puts on input s; y_t = sum_s alpha * x_s
    reconstructs the scan output per channel. Lower triangular by causality.
    Sequences longer than 4096 are refused (quadratic memory).
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise ValueError("hidden_attention expects an unbatched (T, C) sequence")
    Tlen, C = x.shape
    if Tlen > MAX_ATTENTION_LEN:
        raise ValueError(
            f"T={Tlen} exceeds hidden-attention capacity {MAX_ATTENTION_LEN}; "
            "truncate the sequence first"
        )
    with T.no_grad():
        delta, bg, cg = params.gates(Tensor(x))
    delta, bg, cg = delta.data, bg.data, cg.data
    A = np.exp(params.a_log.data)  # (C, S)
    S = A.shape[1]
    # log abar cumulative sums per channel and state; exp of differences gives
    # the decay product without under/overflow (differences are <= 0 on the
    # causal triangle, masked to -inf above it).
    log_abar = -delta[:, :, None] * A[None, :, :]  # (T, C, S)
    cum = np.cumsum(log_abar, axis=0)
    tril = np.tril(np.ones((Tlen, Tlen), dtype=bool))
    out = np.zeros((C, Tlen, Tlen)) if per_channel else np.zeros((Tlen, Tlen))
    for c in range(C):
        alpha_c = np.zeros((Tlen, Tlen))
        for s in range(S):
            diff = cum[:, c, s][:, None] - cum[None, :, c, s]
            diff = np.where(tril, diff, -np.inf)
            alpha_c += (cg[:, s][:, None] * np.exp(diff)) * bg[None, :, s]
        alpha_c *= delta[None, :, c]
        if per_channel:
            out[c] = alpha_c
        else:
            out += alpha_c
    if not per_channel:
        out /= C
    return out


def decay_profile(abar, k: int):
    """Influence of an input after k further steps under constant gate abar."""
    arr = np.asarray(abar, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("decay_profile requires abar strictly inside (0, 1)")
    out = arr**k
    return float(out) if np.isscalar(abar) or arr.ndim == 0 else out


def offband_mass(alpha: np.ndarray, band: float) -> float:
    """Fraction of |alpha| at |t - s| > band; 0 for an all-zero matrix."""
    mag = np.abs(np.asarray(alpha, dtype=np.float64))
    total = mag.sum()
    if total == 0.0:
        return 0.0
    n = mag.shape[0]
    idx = np.arange(n)
    far = np.abs(idx[:, None] - idx[None, :]) > band
    return float(mag[far].sum() / total)


def save_hidden_attention_csv(
    alpha: np.ndarray,
    path: str | Path,
    relay_positions: list[int] | None = None,
    band: float | None = None,
) -> None:
    """Write the causal entries (s <= t) as ``t,s,alpha`` rows.

    When ``band`` is given, a footer comment records the off-band mass; relay
    positions go to a footer comment as well (machine-readable sidecars are
    the caller's concern).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "s", "alpha"])
        for t in range(alpha.shape[0]):
            for s in range(t + 1):
                writer.writerow([t, s, repr(float(alpha[t, s]))])
        if relay_positions is not None:
            fh.write(f"# relay_positions={','.join(str(int(p)) for p in relay_positions)}\n")
        if band is not None:
            fh.write(f"# band={float(band)!r} offband_mass={offband_mass(alpha, band)!r}\n")
