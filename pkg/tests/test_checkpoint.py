from __future__ import annotations

import json

import numpy as np
import pytest

from mvvin import config
from mvvin.autodiff import AdamState
from mvvin.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from mvvin.errors import CheckpointError, CompatibilityError
from mvvin.runtime import build_runtime, load_scenes
from mvvin.train import initial_state, make_checkpoint, meta_outer_step, sample_batch


@pytest.fixture(scope="module")
def trained():
    cfg = config.load("micro")
    rt = build_runtime(cfg)
    scenes = load_scenes(cfg, "train")
    state, _, _ = meta_outer_step(initial_state(rt, 0), sample_batch(scenes, 2, 0, 0), rt, 1e-2)
    return cfg, rt, state


def test_round_trip_is_bit_exact(trained, tmp_path):
    cfg, _, state = trained
    ck = make_checkpoint(cfg, state)
    path = save_checkpoint(ck, tmp_path / "c.json")
    back = load_checkpoint(path)
    assert back.theta.bit_equal(state.theta) and back.phi.bit_equal(state.phi)
    assert back.theta.names() == state.theta.names()
    assert back.adam_theta.step == state.adam_theta.step == 1
    for k in state.adam_theta.m:
        assert back.adam_theta.m[k].tobytes() == state.adam_theta.m[k].tobytes()
        assert back.adam_theta.v[k].tobytes() == state.adam_theta.v[k].tobytes()
    assert back.outer_step == 1 and back.config == config.to_dict(cfg)
    # saving again yields the same bytes
    assert save_checkpoint(back, tmp_path / "d.json").read_bytes() == path.read_bytes()


def test_special_values_survive(trained, tmp_path):
    cfg, _, state = trained
    name = state.theta.names()[0]
    state.theta[name].data.flat[0] = -0.0
    ck = make_checkpoint(cfg, state)
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "c.json"))
    assert np.signbit(back.theta[name].data.flat[0])


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("theta"),
        lambda d: d.update(format="other"),
        lambda d: d.update(version=99),
        lambda d: d["theta"]["arrays"][next(iter(d["theta"]["arrays"]))].update(data="***"),
        lambda d: d["theta"]["arrays"][next(iter(d["theta"]["arrays"]))].update(shape=[1, 2, 3, 4, 5]),
        lambda d: d["theta"]["order"].pop(),
        lambda d: d["adam_phi"].pop("m"),
    ],
)
def test_corruption_detected(trained, tmp_path, mutate):
    cfg, _, state = trained
    doc = json.loads(make_checkpoint(cfg, state).to_json())
    mutate(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_truncated_file(trained, tmp_path):
    cfg, _, state = trained
    p = save_checkpoint(make_checkpoint(cfg, state), tmp_path / "c.json")
    p.write_text(p.read_text()[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_compatibility(trained):
    cfg, rt, state = trained
    check_compatible(state.theta, rt.spec.param_shapes(), "theta")
    other = build_runtime(config.load("micro", {"model.hidden_size": 3}))
    with pytest.raises(CompatibilityError, match="shape"):
        check_compatible(state.theta, other.spec.param_shapes(), "theta")
    seg_rgb = build_runtime(config.load("desk-mini", {"modalities.enabled": ["rgb"]}))
    with pytest.raises(CompatibilityError, match="names differ"):
        check_compatible(state.theta, seg_rgb.spec.param_shapes(), "theta")


def test_empty_adam_state_round_trips(tmp_path):
    cfg = config.load("micro")
    st = initial_state(build_runtime(cfg), 3)
    back = load_checkpoint(save_checkpoint(make_checkpoint(cfg, st), tmp_path / "c.json"))
    assert back.adam_theta == AdamState()
