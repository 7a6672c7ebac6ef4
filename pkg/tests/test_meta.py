from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from mvvin import config
from mvvin.autodiff import ParamSet, Tensor, backward_pass, enable_grad, no_grad, ops
from mvvin.env import Action
from mvvin.errors import ArgumentError, OracleError
from mvvin.meta import (
    FixedEpisode,
    actor_critic_loss,
    discounted_returns,
    episode_advantages,
    episode_first_order_grad,
    episode_nav_loss,
    exact_meta_gradient_oracle,
    first_order_meta_grad,
    init_phi,
    inner_adapt,
    interaction_loss,
    leaf_copy,
    phi_imitation_grad,
    phi_meta_grad,
    sgd_nodes,
)
from mvvin.runtime import build_runtime, load_scenes
from mvvin.train import initial_state, meta_outer_step, sample_batch, task_gradients, train_loop
from mvvin.verify import _trial_episode, collapse_step, toy_meta_gradients


@pytest.fixture(scope="module")
def micro():
    cfg = config.load("micro")
    return cfg, build_runtime(cfg), load_scenes(cfg, "train")


# ---------------------------------------------------------------- navigation loss


def test_nav_loss_single_step_success():
    z = Tensor(np.array([100.0, 0, 0, 0, 0, 0]))  # pi(a) = 1 to double precision
    loss = actor_critic_loss([z], [Tensor([0.0])], [Action.MoveAhead], [5.0], 0.99, 0.0)
    assert loss.item() == pytest.approx(12.5, abs=1e-12)


def test_nav_loss_zero_rewards_zero_value():
    zs = [Tensor(np.random.default_rng(i).normal(size=6)) for i in range(3)]
    loss = actor_critic_loss(zs, [Tensor([0.0])] * 3, [0, 1, 2], [0.0, 0.0, 0.0], 0.99, 0.0)
    assert loss.item() == 0.0


def test_discounted_return_arithmetic():
    R = discounted_returns([-0.01, 4.99], 0.99)
    assert R[0] == pytest.approx(4.9301, abs=1e-12)
    assert R[1] == pytest.approx(4.99, abs=1e-12)


def test_nav_loss_empty_rejected():
    with pytest.raises(ArgumentError):
        actor_critic_loss([], [], [], [], 0.99, 0.01)


def test_nav_loss_advantage_is_detached():
    z = Tensor(np.zeros(6), requires_grad=True)
    v = Tensor([1.0], requires_grad=True)
    with enable_grad():
        backward_pass(actor_critic_loss([z], [v], [0], [3.0], 0.99, 0.0))
    # only the value term reaches V: d/dV 0.5 (R - V)^2 = V - R
    assert v.grad[0] == pytest.approx(-2.0)
    # policy term: -(R - V) * dlogp/dz
    np.testing.assert_allclose(z.grad, -2.0 * (np.eye(6)[0] - 1 / 6))


# ---------------------------------------------------------------- interaction loss


def test_interaction_loss_zero_phi(micro):
    _, rt, scenes = micro
    theta, phi, ep = _trial_episode(0, rt, scenes, 0)
    zero = phi.map(lambda k, v: Tensor(np.zeros(v.shape)))
    hs = [Tensor(np.random.default_rng(i).normal(size=rt.spec.hidden_size)) for i in range(3)]
    zs = [Tensor(np.random.default_rng(10 + i).normal(size=6)) for i in range(3)]
    assert interaction_loss(hs, zs, [0, 1, 2], zero).item() == 0.0
    from mvvin.policy import Window

    win = Window({k: v.data for k, v in theta.items()}, np.zeros(rt.spec.hidden_size), np.zeros(rt.spec.hidden_size),
                 ep.target_vec, ep.obs[:4], ep.prev_actions[:4], ep.actions[:4])
    adapted = inner_adapt(theta, win, zero, 0.5, rt.spec)
    assert adapted.bit_equal(theta)


def test_interaction_loss_width_one_hand_value():
    # hidden size 1, zero logits, one-hot actions: feature rows are [h, z(6), onehot(6)]
    phi = ParamSet(
        {
            "conv1.w": np.zeros((1, 1 + 6 + 6, 1, 1)),
            "conv1.b": np.array([0.5]),
            "conv2.w": np.array([[[[2.0]]]]),
            "conv2.b": np.array([0.0]),
            "head.w": np.array([[3.0]]),
            "head.b": np.array([-1.0]),
        }
    )
    phi["conv1.w"].data[0, 0, 0, 0] = 1.0  # reads h
    phi["conv1.w"].data[0, 1 + 6 + 2, 0, 0] = -4.0  # penalises action 2
    hs = [Tensor([1.0]), Tensor([-2.0]), Tensor([3.0])]
    zs = [Tensor(np.zeros(6))] * 3
    acts = [0, 2, 1]
    # conv1: relu(h + 0.5 - 4*[a==2]) = (1.5, 0, 3.5); conv2: relu(2x) = (3, 0, 7); mean 10/3; head 3*10/3 - 1 = 9
    assert interaction_loss(hs, zs, acts, phi).item() == pytest.approx(9.0, abs=1e-12)


def test_interaction_loss_is_causal():
    rng = np.random.default_rng(0)
    from mvvin.meta import PhiSpec

    phi = init_phi(PhiSpec(3 + 12, (4, 4), (2, 3)), 0)
    hs = [Tensor(rng.normal(size=3)) for _ in range(5)]
    zs = [Tensor(rng.normal(size=6)) for _ in range(5)]
    out = interaction_loss(hs, zs, [0, 1, 2, 3, 4], phi)
    assert out.shape == (1,) and np.isfinite(out.item())
    for k in (1, 2, 7):
        hk = [Tensor(rng.normal(size=3)) for _ in range(k)]
        zk = [Tensor(rng.normal(size=6)) for _ in range(k)]
        assert np.isfinite(interaction_loss(hk, zk, [0] * k, phi).item())


# ---------------------------------------------------------------- inner adaptation


def test_inner_adapt_toy():
    params = ParamSet({"theta": Tensor([1.0])})
    g = {"theta": np.array([2.0])}  # d/dtheta theta^2 at 1
    assert sgd_nodes(params, g, 0.1)["theta"].item() == pytest.approx(0.8)
    d1 = 1.0 - sgd_nodes(params, g, 0.1)["theta"].item()
    d2 = 1.0 - sgd_nodes(params, g, 0.2)["theta"].item()
    assert d2 == pytest.approx(2 * d1)


def test_inner_adapt_psi_zero_and_isolation(micro):
    _, rt, scenes = micro
    theta, phi, ep = _trial_episode(1, rt, scenes, 0)
    from mvvin.policy import Window

    win = Window({k: v.data for k, v in theta.items()}, np.zeros(rt.spec.hidden_size), np.zeros(rt.spec.hidden_size),
                 ep.target_vec, ep.obs[:4], ep.prev_actions[:4], ep.actions[:4])
    before = leaf_copy(theta, requires_grad=False)
    assert inner_adapt(theta, win, phi, 0.0, rt.spec).bit_equal(theta)
    adapted = inner_adapt(theta, win, phi, 0.1, rt.spec)
    assert not adapted.bit_equal(theta)
    for v in adapted.values():
        v.data[...] = 0.0
    assert theta.bit_equal(before)


# ---------------------------------------------------------------- meta-gradients


def test_toy_meta_gradients():
    fo, exact = toy_meta_gradients()
    assert abs(fo + 0.1) <= 1e-6
    assert abs(exact + 0.09) <= 1e-6


def test_oracle_psi_zero_equals_plain_gradient():
    params = ParamSet({"theta": Tensor([0.3, -1.2])})

    def inner(p):
        return ops.sum(ops.square(p["theta"]))

    def outer(_, a):
        return ops.sum(ops.mul(ops.square(ops.sub(a["theta"], 1.0)), Tensor([1.0, 3.0])))

    fo = first_order_meta_grad(params, inner, outer, 0.0)["theta"]
    ex = exact_meta_gradient_oracle(params, inner, outer, 0.0)["theta"]
    np.testing.assert_allclose(fo, [2 * (0.3 - 1), 6 * (-1.2 - 1)], rtol=1e-12)
    np.testing.assert_allclose(ex, fo, atol=1e-8)


def test_oracle_detects_nondeterminism():
    params = ParamSet({"theta": Tensor([1.0])})
    rng = np.random.default_rng(0)

    def noisy(_, a):
        return ops.add(ops.sum(a["theta"]), float(rng.normal()))

    with pytest.raises(OracleError):
        exact_meta_gradient_oracle(params, lambda p: ops.sum(p["theta"]), noisy, 0.1)


def test_episode_psi_zero_first_order_matches_oracle(micro):
    cfg, rt, scenes = micro
    rt0 = replace(rt, psi=0.0)
    theta, phi, ep = _trial_episode(2, rt0, scenes, 0)
    fo = episode_first_order_grad(theta, ep, rt0.spec, phi, 0.0, rt0.gamma, rt0.beta)
    from mvvin.meta import episode_exact_oracle

    ex = episode_exact_oracle(theta, ep, rt0.spec, phi, 0.0, rt0.gamma, rt0.beta)
    for k in theta.names():
        np.testing.assert_allclose(fo[k], ex[k], atol=1e-6)


def test_live_gradient_matches_replay(micro):
    cfg, rt, scenes = micro
    state = initial_state(rt, 0)
    scene, task, ss = sample_batch(scenes, 1, 5, 0)[0]
    arrays = {k: v.data for k, v in state.theta.items()}
    phi_arrays = {k: v.data for k, v in state.phi.items()}
    res = task_gradients((arrays, phi_arrays, scene, task, ss, rt, True))
    # replay the same episode (same seed gives the same actions)
    from mvvin.policy import rollout

    with no_grad():
        traj = rollout(scene, task, leaf_copy(arrays, False), rt.spec, rt.target_vector(task.command, scene),
                       rt.with_settings(mode="sample").settings, rt.render, rng=np.random.default_rng(ss),
                       adapter=lambda w, cur: inner_adapt(cur, w, state.phi, rt.psi, rt.spec))
    assert len(traj.steps) == res.steps
    ep = FixedEpisode.from_trajectory(traj, rt.target_vector(task.command, scene), rt.settings.k, rt.settings.readapt)
    replayed = episode_first_order_grad(state.theta, ep, rt.spec, state.phi, rt.psi, rt.gamma, rt.beta)
    for k in replayed:
        np.testing.assert_allclose(res.theta_grads[k], replayed[k], rtol=1e-9, atol=1e-12)


def test_phi_meta_gradient_matches_finite_differences(micro):
    cfg, rt, scenes = micro
    rt1 = replace(rt, settings=replace(rt.settings, readapt=False))
    theta, phi, ep = _trial_episode(3, rt1, scenes, 0)
    ep = replace(ep, readapt=False)
    adv = episode_advantages(theta, ep, rt1.spec, phi, rt1.psi, rt1.gamma)
    # capture v = dL/dtheta' at the adapted nodes through a live replay
    from mvvin.meta import episode_replay
    import mvvin.meta as meta_mod

    captured = {}
    real_sgd = meta_mod.sgd_nodes

    def spy(params, grads, psi):
        out = real_sgd(params, grads, psi)
        captured["nodes"] = out
        captured["window_theta"] = {k: v.data.copy() for k, v in params.items()}
        return out

    meta_mod.sgd_nodes = spy
    try:
        leaf = leaf_copy(theta)
        with enable_grad():
            logits, values = episode_replay(leaf, ep, rt1.spec, phi, rt1.psi)
            loss = actor_critic_loss(logits, values, ep.actions, ep.rewards, rt1.gamma, rt1.beta, adv)
            nodes = list(captured["nodes"].values())
            got = backward_pass(loss, capture=nodes)
    finally:
        meta_mod.sgd_nodes = real_sgd
    v = {k: got[t._id] for k, t in captured["nodes"].items()}
    from mvvin.policy import Window

    k = ep.k
    win = Window(captured["window_theta"], np.zeros(rt1.spec.hidden_size), np.zeros(rt1.spec.hidden_size), ep.target_vec,
                 ep.obs[:k], ep.prev_actions[:k], ep.actions[:k])
    analytic = phi_meta_grad([win], [v], rt1.spec, phi, rt1.psi, 1e-5)

    def objective(p):
        with no_grad():
            return episode_nav_loss(leaf_copy(theta, False), ep, rt1.spec, p, rt1.psi, rt1.gamma, rt1.beta, adv).item()

    flat = phi.flatten()
    h = 1e-5
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += h
        lo[i] -= h
        fd[i] = (objective(phi.unflatten(hi)) - objective(phi.unflatten(lo))) / (2 * h)
    got_flat = np.concatenate([analytic[n].ravel() for n in phi.names()])
    np.testing.assert_allclose(got_flat, fd, rtol=1e-4, atol=1e-8)


def test_phi_imitation_gradient_shape(micro):
    _, rt, scenes = micro
    theta, phi, ep = _trial_episode(4, rt, scenes, 0)
    from mvvin.policy import Window

    win = Window({k: v.data for k, v in theta.items()}, np.zeros(rt.spec.hidden_size), np.zeros(rt.spec.hidden_size),
                 ep.target_vec, ep.obs[:4], ep.prev_actions[:4], ep.actions[:4])
    g = phi_imitation_grad([win], rt.spec, phi, 3.0)
    assert set(g) == set(phi.names())
    assert any(np.any(x) for x in g.values())
    assert all(not np.any(x) for x in phi_imitation_grad([], rt.spec, phi, 3.0).values())


# ---------------------------------------------------------------- outer step


def test_psi_zero_collapses_to_plain_actor_critic(micro):
    cfg, _, _ = micro
    meta_state, plain_state, (gt, gp), (pt, pp) = collapse_step(config.load("micro", {"env.max_steps": 20}))
    assert meta_state.theta.bit_equal(plain_state.theta)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(gt.values(), pt.values()))
    assert all(not np.any(v) for v in gp.values())
    assert meta_state.phi.bit_equal(plain_state.phi)


def test_outer_step_deterministic(micro):
    cfg, rt, scenes = micro
    batch = sample_batch(scenes, 3, 11, 0)
    a, _, _ = meta_outer_step(initial_state(rt, 0), batch, rt, 1e-3)
    b, _, _ = meta_outer_step(initial_state(rt, 0), sample_batch(scenes, 3, 11, 0), rt, 1e-3)
    assert a.theta.bit_equal(b.theta) and a.phi.bit_equal(b.phi)


def test_outer_step_worker_count_invariant(micro):
    cfg, rt, scenes = micro
    batch = sample_batch(scenes, 4, 2, 0)
    a, _, _ = meta_outer_step(initial_state(rt, 0), batch, rt, 1e-3, workers=1)
    b, _, _ = meta_outer_step(initial_state(rt, 0), batch, rt, 1e-3, workers=2)
    assert a.theta.bit_equal(b.theta) and a.phi.bit_equal(b.phi)


def test_empty_batch_rejected(micro):
    _, rt, _ = micro
    with pytest.raises(ArgumentError):
        meta_outer_step(initial_state(rt, 0), [], rt, 1e-3)


def test_imitate_objective_runs(micro):
    cfg, rt, scenes = micro
    rti = replace(rt, phi_objective="imitate")
    new, res, (gt, gp) = meta_outer_step(initial_state(rti, 0), sample_batch(scenes, 2, 0, 0), rti, 1e-3)
    assert new.outer_step == 1
    assert set(gp) == set(new.phi.names())


def test_zero_outer_steps_keeps_init(micro, tmp_path):
    cfg, rt, scenes = micro
    cfg0 = config.load("micro", {"meta.outer_steps": 0})
    state = train_loop(cfg0, rt, scenes, (), tmp_path)
    init = initial_state(rt, cfg0.model.init_seed)
    assert state.theta.bit_equal(init.theta) and state.phi.bit_equal(init.phi)
    from mvvin.checkpoint import load_checkpoint

    ck = load_checkpoint(tmp_path / "checkpoint.json")
    assert ck.theta.bit_equal(init.theta) and ck.outer_step == 0


def test_resume_is_bit_exact(micro, tmp_path):
    _, rt, scenes = micro
    from mvvin.checkpoint import load_checkpoint
    from mvvin.train import TrainState

    straight = train_loop(config.load("micro", {"meta.outer_steps": 4}), rt, scenes, (), tmp_path / "a")
    train_loop(config.load("micro", {"meta.outer_steps": 2}), rt, scenes, (), tmp_path / "b")
    ck = load_checkpoint(tmp_path / "b" / "checkpoint.json")
    resumed = train_loop(config.load("micro", {"meta.outer_steps": 4}), rt, scenes, (), tmp_path / "b",
                         TrainState(ck.theta, ck.phi, ck.adam_theta, ck.adam_phi, ck.outer_step))
    assert resumed.outer_step == 4
    assert resumed.theta.bit_equal(straight.theta) and resumed.phi.bit_equal(straight.phi)
