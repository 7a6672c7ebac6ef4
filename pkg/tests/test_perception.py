from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvvin import config
from mvvin.autodiff import ParamSet, Tensor
from mvvin.errors import ShapeError
from mvvin.perception import (
    ATensor,
    ProcessorSpec,
    RegionSet,
    aggregate,
    attention_param_shapes,
    init_weights,
    process,
    process_conv,
    process_linear,
    process_proposals,
    region_self_attention,
)
from mvvin.policy import network_spec_from_config
from mvvin.verify import FULL_SHAPES, FULL_AGGREGATE, _timed, check_full_shapes, processor_shapes

DEPTH_FULL = ((64, 3, 3, 3, 3), (64, 3, 3, 2, 3), (64, 3, 3, 2, 3), (64, 3, 3, 2, 1), (64, 3, 3, 2, 2))


def attention_params(value: ProcessorSpec, hidden: int, seed: int = 0) -> ParamSet:
    shapes = [("value." + n, s, f) for n, s, f in value.param_shapes()] + attention_param_shapes(value, hidden)
    return init_weights(shapes, seed)


def random_regions(rng, n, d=6):
    boxes = rng.uniform(0.1, 0.9, size=(n, 4))
    return RegionSet(rng.normal(size=(n, d)), boxes, rng.uniform(0.2, 1.0, size=n), tuple(f"r{i}" for i in range(n)))


# ---------------------------------------------------------------- full-size shapes


def test_full_shapes_paper_config():
    got = processor_shapes(config.load("paper-shapes"))
    for name, want in FULL_SHAPES.items():
        assert got[name] == want, name
    assert got["aggregate"] == (FULL_AGGREGATE[0], (FULL_AGGREGATE[1],))


@pytest.mark.parametrize("name", sorted(FULL_SHAPES))
def test_full_shapes_row_has_one_processor(name):
    spec = network_spec_from_config(config.load("paper-shapes"))
    assert spec.processors[name].in_shape == FULL_SHAPES[name][0] or name in ("depth", "action", "region_proposal")
    assert spec.processors[name].out_shape[0] == FULL_SHAPES[name][1][0]


def test_depth_chain_full_size_exact():
    spec = ProcessorSpec("depth", "conv", (384, 512), DEPTH_FULL)
    assert spec.shapes() == [(1, 384, 512), (64, 128, 170), (64, 63, 56), (64, 31, 18), (64, 15, 16), (64, 7, 7)]


def test_broken_stride_fails_shape_check():
    broken = config.load("paper-shapes", {"modalities.depth.layers": [list(l) for l in DEPTH_FULL[:4]] + [[64, 3, 3, 2, 3]]})
    with pytest.raises(ShapeError):
        network_spec_from_config(broken)
    check = _timed("full_shapes", lambda: check_full_shapes(broken))
    assert not check.ok and "depth" in check.detail


def test_desk_depth_chain_lands_on_grid():
    cfg = config.load("desk-mini")
    spec = network_spec_from_config(cfg)
    assert tuple(cfg.env.depth_shape) == (24, 32)
    assert spec.processors["depth"].out_shape[1:] == (7, 7)
    assert spec.processors["rgb"].out_shape[1:] == (7, 7)


# ---------------------------------------------------------------- processors


def test_linear_zero_input_zero_bias_gives_zero():
    spec = ProcessorSpec("seg", "linear", (5,), ((4,), (3,)))
    params = init_weights(spec.param_shapes(), 0)
    out = process_linear(np.zeros(5), spec, params)
    assert out.kind == "vector" and out.payload.shape == (3,)
    assert not np.any(out.payload.data)


def test_action_one_hot_to_ten():
    spec = ProcessorSpec("action", "linear", (6,), ((10,),))
    out = process(np.eye(6)[2], spec, init_weights(spec.param_shapes(), 1))
    assert out.payload.shape == (10,)
    assert np.all(out.payload.data >= 0)


def test_conv_accepts_two_dim_input_as_single_channel():
    spec = ProcessorSpec("depth", "conv", (9, 9), ((2, 3, 3, 1, 1),))
    params = init_weights(spec.param_shapes(), 2)
    x = np.random.default_rng(0).normal(size=(9, 9))
    a = process_conv(x, spec, params).payload.data
    b = process_conv(x[None], spec, params).payload.data
    assert a.shape == (2, 7, 7)
    assert a.tobytes() == b.tobytes()


def test_conv_shape_mismatch_names_processor():
    spec = ProcessorSpec("rgb", "conv", (3, 7, 7), ((4, 1, 1, 1, 1),))
    with pytest.raises(ShapeError, match="rgb"):
        process_conv(np.zeros((2, 7, 7)), spec, init_weights(spec.param_shapes(), 0))


# ---------------------------------------------------------------- attention


def test_attention_scores_are_probabilities():
    rng = np.random.default_rng(0)
    spec = ProcessorSpec("region_feature", "linear", (6,), ((5,),))
    params = attention_params(spec, 4)
    for n in range(1, 8):
        _, scores = region_self_attention(random_regions(rng, n), spec, params)
        assert scores.shape == (n,)
        assert abs(scores.sum() - 1.0) <= 1e-6
        assert np.all(scores > 0)


def test_attention_seven_identical_regions_uniform():
    spec = ProcessorSpec("region_feature", "linear", (6,), ((5,),))
    params = attention_params(spec, 4, seed=3)
    feat = np.random.default_rng(1).normal(size=6)
    regs = RegionSet(np.tile(feat, (7, 1)), np.full((7, 4), 0.5), np.ones(7))
    pooled, scores = region_self_attention(regs, spec, params)
    assert np.all(scores == 1.0 / 7.0)
    single, _ = region_self_attention(RegionSet(feat[None], np.full((1, 4), 0.5), np.ones(1)), spec, params)
    np.testing.assert_allclose(pooled.payload.data, single.payload.data, rtol=1e-12, atol=1e-15)


def test_attention_closed_form_two_regions():
    # identity value layer on positive features; scorer logit = sum of the value
    spec = ProcessorSpec("region_feature", "linear", (2,), ((2,),))
    params = ParamSet(
        {
            "value.0.w": np.eye(2),
            "value.0.b": np.zeros(2),
            "att.w1": np.eye(2),
            "att.b1": np.zeros(2),
            "att.w2": np.ones((2, 1)),
            "att.b2": np.zeros(1),
        }
    )
    regs = RegionSet(np.array([[math.log(2.0), 0.0], [0.0, 0.0]]), np.full((2, 4), 0.5), np.ones(2))
    pooled, scores = region_self_attention(regs, spec, params)
    np.testing.assert_allclose(scores, [2 / 3, 1 / 3], rtol=1e-12)
    np.testing.assert_allclose(pooled.payload.data, [2 / 3 * math.log(2.0), 0.0], rtol=1e-12)


@given(st.integers(1, 7), st.integers(0, 10_000), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_attention_permutation_invariant(n, seed, rnd):
    rng = np.random.default_rng(seed)
    spec = ProcessorSpec("region_feature", "linear", (6,), ((5,),))
    params = attention_params(spec, 4, seed=seed)
    regs = random_regions(rng, n)
    perm = list(range(n))
    rnd.shuffle(perm)
    shuffled = RegionSet(regs.features[perm], regs.boxes[perm], regs.confidences[perm])
    a, sa = region_self_attention(regs, spec, params)
    b, sb = region_self_attention(shuffled, spec, params)
    assert a.payload.data.tobytes() == b.payload.data.tobytes()
    assert sb.tobytes() == sa[perm].tobytes()


# ---------------------------------------------------------------- proposals


def test_proposals_single_region_is_fc_output():
    spec = ProcessorSpec("region_proposal", "linear", (4,), ((10,),))
    params = init_weights(spec.param_shapes(), 0)
    box = np.array([0.5, 0.5, 0.2, 0.2])
    out = process_proposals(RegionSet(np.zeros((1, 3)), box[None], np.array([0.7])), spec, params)
    np.testing.assert_allclose(out.payload.data, process_linear(box, spec, params).payload.data, rtol=1e-15)


def test_proposals_empty_is_zero():
    spec = ProcessorSpec("region_proposal", "linear", (4,), ((10,),))
    out = process_proposals(RegionSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0)), spec, init_weights(spec.param_shapes(), 0))
    assert out.payload.shape == (10,) and not np.any(out.payload.data)


def test_proposals_equal_confidence_is_mean():
    spec = ProcessorSpec("region_proposal", "linear", (4,), ((10,),))
    params = init_weights(spec.param_shapes(), 4)
    boxes = np.array([[0.1, 0.2, 0.3, 0.4], [0.6, 0.5, 0.2, 0.1]])
    out = process_proposals(RegionSet(np.zeros((2, 3)), boxes, np.array([0.5, 0.5])), spec, params)
    each = [process_linear(b, spec, params).payload.data for b in boxes]
    np.testing.assert_allclose(out.payload.data, (each[0] + each[1]) / 2, rtol=1e-12)


# ---------------------------------------------------------------- aggregation


def test_aggregate_identity_kernel_flattens_input():
    x = np.abs(np.random.default_rng(0).normal(size=(3, 7, 7)))
    out = aggregate([ATensor("map", Tensor(x))], np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    assert out.data.tobytes() == x.reshape(-1).tobytes()


def test_aggregate_tiles_vectors():
    v = np.array([1.0, 2.0])
    out = aggregate([ATensor("vector", Tensor(v))], np.eye(2).reshape(2, 2, 1, 1), np.zeros(2), grid=(3, 4))
    np.testing.assert_array_equal(out.data.reshape(2, 3, 4)[:, 1, 2], v)
    assert out.shape == (24,)


def test_aggregate_rejects_grid_mismatch():
    with pytest.raises(ShapeError):
        aggregate([ATensor("map", Tensor(np.zeros((2, 6, 7))))], np.zeros((1, 2, 1, 1)), np.zeros(1))


def test_aggregate_full_size_channel_count():
    rng = np.random.default_rng(0)
    chans = {"rgb": 64, "depth": 64, "segmentation": 64, "region_feature": 64, "region_proposal": 10, "target": 64, "action": 10}
    ats = [ATensor("map", Tensor(rng.normal(size=(c, 7, 7)))) if n in ("rgb", "depth") else ATensor("vector", Tensor(rng.normal(size=c))) for n, c in chans.items()]
    cin = sum(chans.values())
    assert cin == 340
    out = aggregate(ats, rng.normal(size=(64, cin, 1, 1)), np.zeros(64))
    assert out.shape == (3136,)


def test_aggregate_modality_order_only_permutes_channels():
    rng = np.random.default_rng(5)
    sizes = [("map", 3), ("vector", 2), ("map", 4), ("vector", 5)]
    ats = [ATensor(k, Tensor(rng.normal(size=(c, 7, 7) if k == "map" else c))) for k, c in sizes]
    cin = sum(c for _, c in sizes)
    w = rng.normal(size=(6, cin, 1, 1))
    b = rng.normal(size=6)
    base = aggregate(ats, w, b)
    starts = np.cumsum([0] + [c for _, c in sizes])
    for perm in ([3, 1, 0, 2], [2, 3, 1, 0]):
        idx = np.concatenate([np.arange(starts[i], starts[i + 1]) for i in perm])
        out = aggregate([ats[i] for i in perm], w[:, idx], b)
        np.testing.assert_allclose(out.data, base.data, rtol=1e-12, atol=1e-12)


def test_empty_regions_keep_embedding_shape():
    from mvvin.policy import encode, init_network

    cfg = config.load("desk-mini")
    spec = network_spec_from_config(cfg)
    params = init_network(spec, 0)
    from mvvin.env.render import render_observation
    from mvvin.env.scene import AgentPose, scene_from_rows
    from mvvin.runtime import build_runtime

    rt = build_runtime(cfg)
    scene = scene_from_rows(["#####", "#...#", "#...#", "#..m#", "#####"], {"m": "microwave"})
    blind = render_observation(scene, AgentPose(1, 1, 4), spec=rt.render)
    assert blind.regions == ()
    enc = encode(params, spec, blind, rt.table.vector("microwave"), None)
    assert enc.e.shape == (spec.embed_dim,)
