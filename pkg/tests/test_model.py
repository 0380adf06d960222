"""End-to-end model assembly: configs and variants, pyramid plumbing, anchor
refinement, forward contracts, and the combined training loss."""

import numpy as np
import pytest

from deformtrace import tensor as T
from deformtrace.tensor import Tensor, grad_check
from deformtrace.matching import ANCHOR_EPS
from deformtrace.model import (
    VARIANTS,
    DeformTraceModel,
    ModelConfig,
    PyramidConv,
    build_pyramid,
    fuse_features,
    inverse_sigmoid,
    pad_to_multiple,
    refine_anchors,
)
from deformtrace.nn import Linear


TINY = dict(c=16, l=2, m=1, n_s=2, n_q=4, n_r=2, heads=2, k_points=2, state_dim=2, c_in=3, fps=2.0)


def tiny_cfg(**over) -> ModelConfig:
    return ModelConfig(**{**TINY, **over})


def tiny_inputs(rng, b=2, t=16, c_in=3):
    return rng.normal(size=(b, t, c_in)), rng.normal(size=(b, t, c_in))


# -- config -------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="variant"):
        tiny_cfg(variant="nope").validate()
    with pytest.raises(ValueError, match="heads"):
        tiny_cfg(heads=3).validate()
    with pytest.raises(ValueError, match="divisible by 4"):
        ModelConfig(c=6, heads=2).validate()
    with pytest.raises(ValueError, match="n_r"):
        tiny_cfg(n_r=-1).validate()
    with pytest.raises(ValueError, match="n_q"):
        tiny_cfg(n_q=0).validate()


def test_config_k_falls_back_to_n_s():
    assert tiny_cfg(k_points=0, n_s=5).k == 5
    assert tiny_cfg(k_points=3).k == 3


def test_variant_relay_usage_and_lambdas():
    assert tiny_cfg().uses_relay()
    assert not tiny_cfg(n_r=0).uses_relay()
    assert not tiny_cfg(variant="vanilla_ssm").uses_relay()
    assert not tiny_cfg(variant="fullformer").uses_relay()
    assert tiny_cfg(variant="no_enh").effective_lambdas() == (0.0, 0.2)
    assert tiny_cfg(variant="no_coop").effective_lambdas() == (0.5, 0.0)
    assert tiny_cfg(variant="vanilla_ssm").effective_lambdas() == (0.0, 0.0)
    assert tiny_cfg(lam1=0.7, lam2=0.3).effective_lambdas() == (0.7, 0.3)


# -- plumbing -----------------------------------------------------------------------


def test_pad_to_multiple_replicates_last_frame():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(1, 3, 2))
    padded = pad_to_multiple(x, 4)
    assert padded.data.shape == (1, 4, 2)
    np.testing.assert_array_equal(padded.data[0, 3], x.data[0, 2])
    same = pad_to_multiple(x, 3)
    assert same is x


def test_fuse_features_rejects_mismatch():
    rng = np.random.default_rng(0)
    proj = Linear(rng, 8, 4)
    with pytest.raises(ValueError, match="modality"):
        fuse_features(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 5, 4))), proj)


def test_build_pyramid_shapes_and_odd_error():
    rng = np.random.default_rng(1)
    convs = [PyramidConv(rng, 4) for _ in range(2)]
    levels = build_pyramid(Tensor(rng.normal(size=(2, 8, 4))), convs)
    assert [lvl.data.shape[1] for lvl in levels] == [8, 4, 2]
    with pytest.raises(ValueError, match="odd"):
        build_pyramid(Tensor(rng.normal(size=(1, 6, 4))), convs)


# -- anchor refinement -----------------------------------------------------------------


def test_refine_anchors_zero_delta_identity():
    a = Tensor(np.array([[[0.3, 0.6], [0.5, 0.1]]]))
    out = refine_anchors(a, Tensor(np.zeros((1, 2, 2))))
    np.testing.assert_allclose(out.data, a.data, rtol=1e-12)


def test_refine_anchors_inverse_sigmoid_arithmetic():
    t0, t1 = 0.5, 0.6
    delta = np.log(t1 / (1 - t1)) - np.log(t0 / (1 - t0))
    out = refine_anchors(Tensor(np.array([[t0]])), Tensor(np.array([[delta]])))
    np.testing.assert_allclose(out.data, [[t1]], rtol=1e-12)


def test_refine_anchors_stays_in_unit_interval():
    a = Tensor(np.array([[0.001, 0.999]]))
    out = refine_anchors(a, Tensor(np.array([[30.0, -30.0]])))
    assert (out.data > 0).all() and (out.data < 1).all()
    # beyond float64 resolution sigmoid saturates; the closure still holds
    ext = refine_anchors(a, Tensor(np.array([[500.0, -500.0]])))
    assert (ext.data >= 0).all() and (ext.data <= 1).all()
    assert np.isfinite(ext.data).all()


def test_inverse_sigmoid_clamps_saturated_inputs():
    x = Tensor(np.array([0.0, 1.0, 0.5]))
    out = inverse_sigmoid(x).data
    assert np.isfinite(out).all()
    lo = np.log(ANCHOR_EPS / (1 - ANCHOR_EPS))
    np.testing.assert_allclose(out[0], lo, rtol=1e-9)
    np.testing.assert_allclose(out[1], -lo, rtol=1e-9)
    np.testing.assert_allclose(out[2], 0.0, atol=1e-12)


# -- forward contracts ------------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_contracts_all_variants(variant):
    rng = np.random.default_rng(2)
    cfg = tiny_cfg(variant=variant)
    model = DeformTraceModel(rng, cfg)
    seq_v, seq_a = tiny_inputs(rng)
    out = model(seq_v, seq_a)
    p = out.prediction
    assert p.segments.shape == (2, cfg.n_q, 2)
    assert p.confidence.shape == (2, cfg.n_q)
    assert p.video_score.shape == (2,)
    assert (p.segments > 0).all() and (p.segments < 1).all()
    assert (p.confidence >= 0).all() and (p.confidence <= 1).all()
    assert len(out.anchors_per_layer) == cfg.m
    assert len(out.logits_per_layer) == cfg.m
    relay_expected = cfg.uses_relay()
    assert (len(out.enhance_terms) > 0) == relay_expected
    gts = [np.array([[0.5, 0.2]]), np.zeros((0, 2))]
    total, comps, results = model.loss(out, gts, np.array([1.0, 0.0]))
    assert np.isfinite(total.data)
    assert len(results) == cfg.m
    lam1, lam2 = cfg.effective_lambdas()
    np.testing.assert_allclose(
        comps["total"],
        comps["match"] + comps["cls"] + lam1 * comps["enhance"] + lam2 * comps["coop"],
        rtol=1e-12,
    )


def test_forward_deterministic_and_batch_isolated():
    rng = np.random.default_rng(3)
    model = DeformTraceModel(rng, tiny_cfg())
    seq_v, seq_a = tiny_inputs(rng)
    out1 = model(seq_v, seq_a)
    out2 = model(seq_v, seq_a)
    np.testing.assert_array_equal(out1.prediction.segments, out2.prediction.segments)
    solo = model(seq_v[:1], seq_a[:1])
    np.testing.assert_allclose(
        solo.prediction.segments, out1.prediction.segments[:1], rtol=1e-10, atol=1e-12
    )
    np.testing.assert_allclose(
        solo.prediction.video_score, out1.prediction.video_score[:1], rtol=1e-10
    )


def test_video_logit_is_max_over_query_logits():
    rng = np.random.default_rng(4)
    model = DeformTraceModel(rng, tiny_cfg())
    seq_v, seq_a = tiny_inputs(rng, b=1)
    out = model(seq_v, seq_a)
    np.testing.assert_allclose(
        out.video_logit.data, out.logits_per_layer[-1].data.max(axis=1), rtol=1e-12
    )


def test_forward_pads_irregular_lengths():
    rng = np.random.default_rng(5)
    model = DeformTraceModel(rng, tiny_cfg())
    seq_v, seq_a = tiny_inputs(rng, t=13)  # 13 -> padded to 14 for l=2
    out = model(seq_v, seq_a)
    assert out.grid.sizes == (14, 7)
    with pytest.raises(ValueError, match="padding is disabled"):
        DeformTraceModel(np.random.default_rng(5), tiny_cfg(pad_input=False))(seq_v, seq_a)


def test_forward_accepts_unbatched():
    rng = np.random.default_rng(6)
    model = DeformTraceModel(rng, tiny_cfg())
    seq_v, seq_a = tiny_inputs(rng, b=1)
    out = model(seq_v[0], seq_a[0])
    assert out.prediction.segments.shape == (1, 4, 2)


def test_refinement_identity_with_zero_heads():
    # zero every refinement MLP: anchors must pass through all decoder layers
    rng = np.random.default_rng(7)
    model = DeformTraceModel(rng, tiny_cfg(m=3))
    seq_v, seq_a = tiny_inputs(rng, b=1)
    for layer in model.decoder:
        for lin in layer.refine.layers:
            lin.w.data[:] = 0.0
            lin.b.data[:] = 0.0
    out = model(seq_v, seq_a)
    first = out.anchors_per_layer[0].data
    for anchors in out.anchors_per_layer[1:]:
        np.testing.assert_allclose(anchors.data, first, rtol=1e-12)


def test_encoder_scan_input_lengths():
    rng = np.random.default_rng(8)
    seq_v, seq_a = tiny_inputs(rng, b=1)
    model = DeformTraceModel(rng, tiny_cfg())
    aug, imap = model.encoder_scan_input(seq_v, seq_a)
    assert aug.data.shape[1] == 24 + 2  # 16+8 tokens plus n_r relays
    assert len(imap.positions) == 2

    van = DeformTraceModel(rng, tiny_cfg(variant="vanilla_ssm"))
    aug_v, imap_v = van.encoder_scan_input(seq_v, seq_a)
    assert aug_v.data.shape[1] == 24
    assert len(imap_v.positions) == 0

    dense = DeformTraceModel(rng, tiny_cfg(variant="fullformer"))
    with pytest.raises(ValueError, match="no state-space scan"):
        dense.encoder_scan_input(seq_v, seq_a)
    with pytest.raises(ValueError, match="layer"):
        model.encoder_scan_input(seq_v, seq_a, layer=5)


def test_state_dict_roundtrip_preserves_outputs():
    rng = np.random.default_rng(9)
    cfg = tiny_cfg()
    model = DeformTraceModel(rng, cfg)
    seq_v, seq_a = tiny_inputs(rng, b=1)
    ref = model(seq_v, seq_a).prediction.segments
    clone = DeformTraceModel(np.random.default_rng(999), cfg)
    clone.load_state(model.state_dict())
    np.testing.assert_array_equal(clone(seq_v, seq_a).prediction.segments, ref)


def test_end_to_end_gradcheck():
    rng = np.random.default_rng(10)
    cfg = tiny_cfg(n_r=2)
    model = DeformTraceModel(rng, cfg)
    # keep sampling positions away from the interpolation grid, and spread
    # the initial anchors so anchor-dependent paths carry visible gradients
    for enc in model.encoder:
        enc.self_block.head1.layers[-1].b.data[:] = rng.uniform(0.02, 0.04)
        enc.dsa.core.off_head.b.data[:] = 0.03
    for dec in model.decoder:
        dec.cross.off_head.layers[-1].b.data[:] = 0.03
        dec.dca.core.off_head.b.data[:] = 0.03
    model.anchor_init.layers[-1].b.data[:] = rng.normal(scale=0.7, size=2 * cfg.n_q)
    seq_v, seq_a = tiny_inputs(rng, b=1, t=8)
    gts = [np.array([[0.45, 0.3]])]
    labels = np.array([1.0])

    params = model.named_parameters()
    names = list(params)
    tensors = [params[n] for n in names]

    def fn(inputs):
        out = model(seq_v, seq_a)
        total, _, _ = model.loss(out, gts, labels)
        return total

    # atol discounts entries below the central-difference noise floor
    err = grad_check(fn, tensors, eps=1e-5, atol=1e-7)
    assert err < 1e-3
