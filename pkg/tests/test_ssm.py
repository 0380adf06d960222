"""Scan kernel tests.

The unroll oracle below re-derives the recurrence directly from its
definition (h_t = exp(-delta_t A) h_{t-1} + delta_t B_t x_t, y_t = <C_t, h_t>)
without touching the fused implementation, so the two routes stay independent.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformtrace import tensor as T
from deformtrace.tensor import Tensor, grad_check
from deformtrace.ssm import (
    DELTA_FLOOR,
    MAX_ATTENTION_LEN,
    FBSSM,
    SSMDirection,
    decay_profile,
    discretize,
    hidden_attention,
    offband_mass,
    save_hidden_attention_csv,
    scan_final_state,
    scan_gates,
    selective_scan,
)


def unroll_oracle(x, delta, b, c, a_log):
    """Direct quadratic evaluation of the recurrence from raw gate values."""
    B, Tlen, C = x.shape
    S = a_log.shape[1]
    A = np.exp(a_log)
    h = np.zeros((B, C, S))
    y = np.empty((B, Tlen, C))
    for t in range(Tlen):
        abar = np.exp(-delta[:, t, :, None] * A[None])
        bbar = delta[:, t, :, None] * b[:, t, None, :]
        h = abar * h + bbar * x[:, t, :, None]
        y[:, t] = (h * c[:, t, None, :]).sum(axis=-1)
    return y, h


def make_params(rng, dim, state):
    return SSMDirection(rng, dim, state)


def test_scan_matches_unroll_oracle_many_trials():
    worst = 0.0
    for trial in range(25):
        rng = np.random.default_rng(100 + trial)
        B = int(rng.integers(1, 4))
        Tlen = int(rng.integers(1, 65))
        C = int(rng.integers(1, 9))
        S = int(rng.integers(1, 5))
        params = make_params(rng, C, S)
        x = Tensor(rng.normal(size=(B, Tlen, C)))
        y = selective_scan(x, params, "forward")
        with T.no_grad():
            delta, bg, cg = params.gates(x)
        ref, _ = unroll_oracle(x.data, delta.data, bg.data, cg.data, params.a_log.data)
        worst = max(worst, float(np.abs(y.data - ref).max()))
    assert worst < 1e-9


def test_backward_direction_is_flip_scan_flip():
    rng = np.random.default_rng(5)
    params = make_params(rng, 4, 3)
    x = rng.normal(size=(2, 11, 4))
    yb = selective_scan(Tensor(x), params, "backward")
    yf = selective_scan(Tensor(x[:, ::-1].copy()), params, "forward")
    np.testing.assert_allclose(yb.data, yf.data[:, ::-1], rtol=0, atol=1e-14)


def test_scan_final_state_matches_oracle():
    rng = np.random.default_rng(6)
    params = make_params(rng, 5, 2)
    x = Tensor(rng.normal(size=(3, 13, 5)))
    hN = scan_final_state(x, params)
    with T.no_grad():
        delta, bg, cg = params.gates(x)
    _, h_ref = unroll_oracle(x.data, delta.data, bg.data, cg.data, params.a_log.data)
    np.testing.assert_allclose(hN.data, h_ref, rtol=0, atol=1e-12)


def test_fused_and_composed_routes_agree_on_values_and_grads():
    # route A: fused node; route B: discretize + scan_gates
    rng = np.random.default_rng(7)
    C, S = 4, 3
    params = make_params(rng, C, S)
    x_data = rng.normal(size=(2, 9, C))
    w = rng.normal(size=(2, 9, C))

    xa = Tensor(x_data.copy(), requires_grad=True)
    ya = selective_scan(xa, params, "forward")
    T.tsum(ya * Tensor(w)).backward()
    ga = xa.grad.copy()
    ga_log = params.a_log.grad.copy()

    for p in params.named_parameters().values():
        p.zero_grad()
    xb = Tensor(x_data.copy(), requires_grad=True)
    delta, bg, cg = params.gates(xb)
    abar, bbar = discretize(delta, params.a_log, bg)
    yb = scan_gates(abar, bbar, cg, xb)
    T.tsum(yb * Tensor(w)).backward()

    np.testing.assert_allclose(ya.data, yb.data, rtol=0, atol=1e-13)
    np.testing.assert_allclose(ga, xb.grad, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ga_log, params.a_log.grad, rtol=1e-10, atol=1e-12)


def test_scan_gradcheck():
    rng = np.random.default_rng(8)
    params = make_params(rng, 4, 2)
    x = Tensor(rng.normal(size=(2, 7, 4)), requires_grad=True)
    w = rng.normal(size=(2, 7, 4))
    ps = list(params.named_parameters().values())
    err = grad_check(
        lambda i: T.tsum(selective_scan(i[0], params, "forward") * Tensor(w)), [x] + ps
    )
    assert err < 1e-4


def test_final_state_gradcheck():
    rng = np.random.default_rng(9)
    params = make_params(rng, 3, 2)
    x = Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True)
    w = rng.normal(size=(2, 3, 2))
    ps = list(params.named_parameters().values())
    err = grad_check(lambda i: T.tsum(scan_final_state(i[0], params) * Tensor(w)), [x] + ps)
    assert err < 1e-4


# -- gates and discretization ---------------------------------------------------------


def test_a_log_rows_cover_slow_to_fast():
    params = make_params(np.random.default_rng(0), 5, 4)
    row = np.log(np.arange(1, 5, dtype=np.float64))
    np.testing.assert_array_equal(params.a_log.data, np.tile(row, (5, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_delta_floor_property(seed):
    rng = np.random.default_rng(seed)
    params = make_params(rng, 3, 2)
    x = Tensor(rng.normal(scale=10.0, size=(1, 8, 3)))
    delta, _, _ = params.gates(x)
    assert np.all(delta.data >= DELTA_FLOOR)


def test_discretize_formulas_and_limits():
    delta = Tensor(np.array([[0.5, 1.0]]))
    a_log = Tensor(np.log(np.array([[1.0, 2.0], [3.0, 4.0]])))
    b = Tensor(np.array([[0.7, -0.2]]))
    abar, bbar = discretize(delta, a_log, b)
    A = np.exp(a_log.data)
    np.testing.assert_allclose(abar.data, np.exp(-delta.data[..., None] * A), rtol=1e-15)
    np.testing.assert_allclose(bbar.data, delta.data[..., None] * b.data[..., None, :], rtol=1e-15)
    # delta -> 0 is the no-update limit
    abar0, bbar0 = discretize(Tensor(np.zeros((1, 2))), a_log, b)
    np.testing.assert_array_equal(abar0.data, np.ones((1, 2, 2)))
    np.testing.assert_array_equal(bbar0.data, np.zeros((1, 2, 2)))


def test_discretize_gradcheck():
    rng = np.random.default_rng(10)
    delta = Tensor(rng.uniform(0.1, 1.0, size=(2, 3)), requires_grad=True)
    a_log = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    wa = rng.normal(size=(2, 3, 2))
    wb = rng.normal(size=(2, 3, 2))

    def f(inputs):
        abar, bbar = discretize(inputs[0], inputs[1], inputs[2])
        return T.tsum(abar * Tensor(wa)) + T.tsum(bbar * Tensor(wb))

    assert grad_check(f, [delta, a_log, b]) < 1e-6


def test_scan_gates_linear_in_x_for_fixed_gates():
    rng = np.random.default_rng(11)
    B, Tlen, C, S = 1, 6, 3, 2
    abar = Tensor(rng.uniform(0.2, 0.9, size=(B, Tlen, C, S)))
    bbar = Tensor(rng.normal(size=(B, Tlen, C, S)))
    cg = Tensor(rng.normal(size=(B, Tlen, S)))
    x1, x2 = rng.normal(size=(2, B, Tlen, C))
    y1 = scan_gates(abar, bbar, cg, Tensor(x1)).data
    y2 = scan_gates(abar, bbar, cg, Tensor(x2)).data
    y12 = scan_gates(abar, bbar, cg, Tensor(2.0 * x1 - 3.0 * x2)).data
    np.testing.assert_allclose(y12, 2.0 * y1 - 3.0 * y2, rtol=1e-10, atol=1e-12)


def test_constant_gate_impulse_decays_geometrically():
    # an impulse at t=0 under constant gates echoes as cg * abar^k * bbar
    B, Tlen, C, S = 1, 8, 1, 1
    a, bb, cc = 0.6, 0.9, 1.3
    abar = Tensor(np.full((B, Tlen, C, S), a))
    bbar = Tensor(np.full((B, Tlen, C, S), bb))
    cg = Tensor(np.full((B, Tlen, S), cc))
    x = np.zeros((B, Tlen, C))
    x[0, 0, 0] = 1.0
    y = scan_gates(abar, bbar, cg, Tensor(x)).data[0, :, 0]
    ks = np.arange(Tlen)
    np.testing.assert_allclose(y, cc * bb * decay_profile(a, 0) * a ** ks, rtol=1e-12)


# -- validation -------------------------------------------------------------------


def test_scan_validations():
    rng = np.random.default_rng(12)
    params = make_params(rng, 4, 2)
    with pytest.raises(ValueError):
        selective_scan(Tensor(np.zeros((2, 5, 3))), params)  # channel mismatch
    with pytest.raises(ValueError):
        selective_scan(Tensor(np.zeros((2, 0, 4))), params)  # empty time axis
    with pytest.raises(ValueError):
        selective_scan(Tensor(np.zeros((2, 5, 4))), params, "sideways")
    with pytest.raises(ValueError):
        scan_final_state(Tensor(np.zeros((5, 4))), params)
    with pytest.raises(ValueError):
        SSMDirection(rng, 4, 0)


def test_unbatched_input_round_trips():
    rng = np.random.default_rng(13)
    params = make_params(rng, 3, 2)
    x = rng.normal(size=(7, 3))
    y2 = selective_scan(Tensor(x), params)
    y3 = selective_scan(Tensor(x[None]), params)
    assert y2.data.shape == (7, 3)
    np.testing.assert_array_equal(y2.data, y3.data[0])


def test_fbssm_composition():
    rng = np.random.default_rng(14)
    fb = FBSSM(rng, 4, 2)
    x = Tensor(np.random.default_rng(15).normal(size=(2, 9, 4)))
    out = fb(x)
    ref = fb.proj(selective_scan(x, fb.fwd, "forward") + selective_scan(x, fb.bwd, "backward"))
    np.testing.assert_array_equal(out.data, ref.data)


# -- hidden attention ---------------------------------------------------------------


def test_hidden_attention_reconstructs_scan_output():
    rng = np.random.default_rng(16)
    C, S, Tlen = 3, 2, 12
    params = make_params(rng, C, S)
    x = rng.normal(size=(Tlen, C))
    y = selective_scan(Tensor(x), params, "forward")
    alpha = hidden_attention(x, params, per_channel=True)
    recon = np.stack([alpha[c] @ x[:, c] for c in range(C)], axis=1)
    assert np.abs(recon - y.data).max() < 1e-6


def test_hidden_attention_channel_mean_and_causality():
    rng = np.random.default_rng(17)
    params = make_params(rng, 4, 2)
    x = rng.normal(size=(9, 4))
    per = hidden_attention(x, params, per_channel=True)
    mean = hidden_attention(x, params)
    np.testing.assert_allclose(mean, per.mean(axis=0), rtol=1e-12)
    # strictly causal: zero above the diagonal
    assert np.array_equal(np.triu(mean, k=1), np.zeros_like(mean))


def test_hidden_attention_accepts_singleton_batch_and_tensor():
    rng = np.random.default_rng(18)
    params = make_params(rng, 3, 2)
    x = rng.normal(size=(6, 3))
    a1 = hidden_attention(x, params)
    a2 = hidden_attention(Tensor(x[None]), params)
    np.testing.assert_array_equal(a1, a2)
    with pytest.raises(ValueError):
        hidden_attention(np.zeros((2, 6, 3)), params)


def test_hidden_attention_capacity_guard():
    params = make_params(np.random.default_rng(19), 1, 1)
    with pytest.raises(ValueError, match="truncate"):
        hidden_attention(np.zeros((MAX_ATTENTION_LEN + 1, 1)), params)


# -- decay profile / off-band mass ----------------------------------------------------


def test_decay_profile_values_and_bounds():
    assert decay_profile(0.5, 3) == pytest.approx(0.125)
    arr = decay_profile(np.array([0.9, 0.5]), 2)
    np.testing.assert_allclose(arr, [0.81, 0.25])
    ks = np.array([decay_profile(0.8, k) for k in range(6)])
    assert np.all(np.diff(ks) < 0)
    with pytest.raises(ValueError):
        decay_profile(1.0, 2)
    with pytest.raises(ValueError):
        decay_profile(0.0, 2)


def test_offband_mass_hand_example():
    alpha = np.array([[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [2.0, 0.5, 1.0]])
    # band 1: only |t-s| > 1 counts -> the 2.0 entry out of total 6.0
    assert offband_mass(alpha, 1.0) == pytest.approx(2.0 / 6.0)
    assert offband_mass(alpha, 2.0) == 0.0
    assert offband_mass(np.zeros((4, 4)), 1.0) == 0.0


def test_hidden_attention_csv_roundtrip(tmp_path):
    alpha = np.array([[1.0, 0.0], [0.25, 0.5]])
    path = tmp_path / "alpha.csv"
    save_hidden_attention_csv(alpha, path, relay_positions=[3, 7], band=0.5)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,s,alpha"
    rows = [ln.split(",") for ln in lines[1:] if not ln.startswith("#")]
    assert [(int(r[0]), int(r[1])) for r in rows] == [(0, 0), (1, 0), (1, 1)]
    assert float(rows[2][2]) == 0.5
    footer = [ln for ln in lines if ln.startswith("#")]
    assert any("relay_positions=3,7" in ln for ln in footer)
    assert any("offband_mass" in ln for ln in footer)
