"""Deformable cross-scan readout and its non-deformable counterpart."""

import numpy as np
import pytest

from deformtrace import tensor as T
from deformtrace.tensor import Tensor, grad_check
from deformtrace.deform import reference_points, split_levels
from deformtrace.ssm import selective_scan
from deformtrace.dcssm import DCSSMBlock, VanillaCrossBlock, query_sample_points


def test_query_sample_points_formula():
    anchor = Tensor(np.array([[[0.5, 0.2]]]))  # t=0.5, d=0.2
    offsets = Tensor(np.array([[[[-1.0, 0.0, 1.0, 2.0]]]]).reshape(1, 1, 1, 4))
    p = query_sample_points(anchor, offsets)
    # p = t + o*d/2; o=+-1 lands on the segment endpoints
    np.testing.assert_allclose(p.data.reshape(-1), [0.4, 0.5, 0.6, 0.7], rtol=1e-15)


def test_query_sample_points_grad():
    rng = np.random.default_rng(0)
    anchor = Tensor(rng.uniform(0.2, 0.8, size=(1, 2, 2)), requires_grad=True)
    offsets = Tensor(rng.normal(size=(1, 2, 3, 2)), requires_grad=True)
    w = rng.normal(size=(1, 2, 3, 2))
    assert grad_check(
        lambda i: T.tsum(query_sample_points(i[0], i[1]) * Tensor(w)), [anchor, offsets]
    ) < 1e-7


def make_setup(rng, dim=4, n_q=3, state=2, flatten="scale_major"):
    grid = reference_points(8, 2, 1.0, 2.0, 4.0)
    block = DCSSMBlock(rng, dim, grid.levels, 2, state, flatten=flatten)
    xe = Tensor(rng.normal(size=(2, grid.total_tokens, dim)))
    levels = split_levels(xe, grid)
    q = Tensor(rng.normal(size=(2, n_q, dim)))
    anchors = Tensor(rng.uniform(0.2, 0.8, size=(2, n_q, 2)))
    return grid, block, xe, levels, q, anchors


def test_sample_sequence_shape_and_empty_token_last():
    rng = np.random.default_rng(1)
    grid, block, xe, levels, q, anchors = make_setup(rng)
    seq = block.sample_sequence(q, anchors, levels, grid)
    assert seq.data.shape == (2 * 3, grid.levels * 2 + 1, 4)
    # the final position of every per-query sequence is the empty token
    np.testing.assert_array_equal(
        seq.data[:, -1], np.broadcast_to(block.empty.data, (6, 4))
    )


def test_sample_sequence_oracle_zero_offsets():
    # with zero offsets every sample sits at p = t (duration ignored), so the
    # sequence rows are linear interpolation of each level at the anchor time
    rng = np.random.default_rng(2)
    grid, block, xe, levels, q, anchors = make_setup(rng)
    seq = block.sample_sequence(q, anchors, levels, grid)
    b, nq = 2, 3
    for bi in range(b):
        for qi in range(nq):
            t = anchors.data[bi, qi, 0]
            row = seq.data[bi * nq + qi]
            col = 0
            for lvl in range(1, grid.levels + 1):
                u = t * grid.frac_index_scale(lvl) - 0.5
                hi = grid.valid[lvl - 1] - 1
                uc = np.clip(u, 0.0, hi)
                i0 = min(int(np.floor(uc)), max(hi - 1, 0))
                w = uc - i0
                f = levels[lvl - 1].data[bi]
                ref = (1 - w) * f[i0] + w * f[min(i0 + 1, hi)]
                for _ in range(block.n_s):
                    np.testing.assert_allclose(row[col], ref, rtol=1e-12)
                    col += 1


def test_flatten_orders_are_permutations():
    rng = np.random.default_rng(3)
    grid, block, xe, levels, q, anchors = make_setup(rng, flatten="scale_major")
    block_om = DCSSMBlock(rng, 4, grid.levels, 2, 2, flatten="offset_major")
    # share all weights so only the flatten order differs
    block_om.load_state(block.state_dict())
    s_sm = block.sample_sequence(q, anchors, levels, grid)
    s_om = block_om.sample_sequence(q, anchors, levels, grid)
    L, n_s = grid.levels, 2
    body = s_sm.data[:, :-1].reshape(6, L, n_s, 4)
    np.testing.assert_allclose(
        s_om.data[:, :-1], body.transpose(0, 2, 1, 3).reshape(6, L * n_s, 4), rtol=0, atol=0
    )
    np.testing.assert_array_equal(s_sm.data[:, -1], s_om.data[:, -1])


def test_readout_is_final_scan_position():
    rng = np.random.default_rng(4)
    grid, block, xe, levels, q, anchors = make_setup(rng)
    seq = block.sample_sequence(q, anchors, levels, grid)
    y = selective_scan(seq, block.scan, "forward")
    r = block.readout(q, anchors, levels, grid)
    np.testing.assert_array_equal(r.data, y.data[:, -1].reshape(2, 3, 4))


def test_block_residual_form():
    rng = np.random.default_rng(5)
    grid, block, xe, levels, q, anchors = make_setup(rng)
    out = block(q, anchors, levels, grid)
    ref = q + block.ffn(block.norm_r(block.readout(q, anchors, levels, grid)))
    np.testing.assert_array_equal(out.data, ref.data)
    # zero FFN output layer -> block is the identity on queries
    block.ffn.fc2.w.data[:] = 0.0
    block.ffn.fc2.b.data[:] = 0.0
    np.testing.assert_array_equal(block(q, anchors, levels, grid).data, q.data)


def test_query_subspaces_are_isolated():
    # changing one query leaves every other query's output untouched
    rng = np.random.default_rng(6)
    grid, block, xe, levels, q, anchors = make_setup(rng)
    out1 = block(q, anchors, levels, grid)
    q2 = Tensor(q.data.copy())
    q2.data[0, 1] += 10.0
    out2 = block(q2, anchors, levels, grid)
    np.testing.assert_array_equal(out1.data[0, 0], out2.data[0, 0])
    np.testing.assert_array_equal(out1.data[0, 2], out2.data[0, 2])
    np.testing.assert_array_equal(out1.data[1], out2.data[1])
    assert not np.allclose(out1.data[0, 1], out2.data[0, 1])


def test_dcssm_gradcheck():
    rng = np.random.default_rng(7)
    grid = reference_points(4, 1, 1.0, 2.0, 2.0)
    block = DCSSMBlock(rng, 3, 1, 1, 2)
    # keep sampling off interpolation kinks
    block.off_head.layers[-1].b.data[:] = 0.03
    xe = Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True)
    q = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
    anchors = Tensor(rng.uniform(0.3, 0.7, size=(1, 2, 2)), requires_grad=True)
    w = rng.normal(size=(1, 2, 3))
    params = list(block.named_parameters().values())

    def f(inputs):
        levels = split_levels(inputs[0], grid)
        return T.tsum(block(inputs[1], inputs[2], levels, grid) * Tensor(w))

    assert grad_check(f, [xe, q, anchors] + params) < 1e-4


def test_flatten_validation():
    with pytest.raises(ValueError):
        DCSSMBlock(np.random.default_rng(8), 4, 2, 1, 2, flatten="diagonal")


# -- vanilla cross block ---------------------------------------------------------------


def test_vanilla_cross_matches_per_query_full_scan():
    # scanning [sequence, query] per query must equal the shared-prefix form
    rng = np.random.default_rng(9)
    dim, state = 4, 2
    block = VanillaCrossBlock(rng, dim, state)
    xe = Tensor(rng.normal(size=(2, 7, dim)))
    q = Tensor(rng.normal(size=(2, 3, dim)))
    r = block.readout(q, xe)
    qn = block.norm_q(q)
    for bi in range(2):
        for qi in range(3):
            seq = np.concatenate([xe.data[bi], qn.data[bi, qi][None]], axis=0)
            y = selective_scan(Tensor(seq[None]), block.scan, "forward")
            np.testing.assert_allclose(r.data[bi, qi], y.data[0, -1], rtol=1e-10, atol=1e-12)


def test_vanilla_cross_query_isolation_and_residual():
    rng = np.random.default_rng(10)
    block = VanillaCrossBlock(rng, 4, 2)
    xe = Tensor(rng.normal(size=(1, 6, 4)))
    q = Tensor(rng.normal(size=(1, 3, 4)))
    out1 = block(q, xe)
    q2 = Tensor(q.data.copy())
    q2.data[0, 0] += 5.0
    out2 = block(q2, xe)
    np.testing.assert_array_equal(out1.data[0, 1:], out2.data[0, 1:])
    block.ffn.fc2.w.data[:] = 0.0
    block.ffn.fc2.b.data[:] = 0.0
    np.testing.assert_array_equal(block(q, xe).data, q.data)


def test_vanilla_cross_gradcheck():
    rng = np.random.default_rng(11)
    block = VanillaCrossBlock(rng, 3, 2)
    xe = Tensor(rng.normal(size=(1, 5, 3)), requires_grad=True)
    q = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
    w = rng.normal(size=(1, 2, 3))
    params = list(block.named_parameters().values())
    assert grad_check(lambda i: T.tsum(block(i[1], i[0]) * Tensor(w)), [xe, q] + params) < 1e-4
