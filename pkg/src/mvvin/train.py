"""Outer training loop: task batches, per-task meta-gradients, Adam on theta and phi."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mvvin.autodiff import AdamState, ParamSet, adam_update, backward_pass, enable_grad
from mvvin.checkpoint import Checkpoint, save_checkpoint
from mvvin.config import RunConfig, config_hash, to_dict
from mvvin.env.scene import GridScene, sample_task
from mvvin.errors import ArgumentError
from mvvin.evaluation import parallel_map, run_evaluation, spl, success_rate
from mvvin.meta import init_phi, inner_adapt, leaf_copy, navigation_loss, phi_imitation_grad, phi_meta_grad
from mvvin.policy import init_network, rollout
from mvvin.runtime import Runtime

METRICS_COLUMNS = ("outer_step", "train_loss", "train_success", "val_success", "val_spl", "wall_time")


@dataclass
class TrainState:
    theta: ParamSet
    phi: ParamSet
    adam_theta: AdamState
    adam_phi: AdamState
    outer_step: int = 0


@dataclass
class TaskResult:
    theta_grads: dict
    phi_grads: dict
    loss: float
    success: bool
    steps: int
    adaptations: int


def initial_state(rt: Runtime, seed: int) -> TrainState:
    return TrainState(init_network(rt.spec, seed), init_phi(rt.phi_spec, seed), AdamState(), AdamState(), 0)


def task_seed(seed: int, outer_step: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, outer_step, index, 0x7A5C])


def sample_batch(scenes: Sequence[GridScene], n: int, seed: int, outer_step: int):
    """One task per scene; scenes drawn without replacement when enough exist."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, outer_step, 0xBA7C]))
    idx = rng.choice(len(scenes), size=n, replace=n > len(scenes))
    batch = []
    for i, si in enumerate(idx):
        task_ss, policy_ss = task_seed(seed, outer_step, i).spawn(2)
        batch.append((scenes[int(si)], sample_task(scenes[int(si)], task_ss), policy_ss))
    return batch


def task_gradients(args) -> TaskResult:
    """Roll out one task with inner adaptation and return its meta-gradient contributions."""
    theta_arrays, phi_arrays, scene, task, policy_ss, rt, adapt = args
    theta = leaf_copy(theta_arrays)
    phi = leaf_copy(phi_arrays, requires_grad=False)
    adapter = None
    if adapt:
        def adapter(win, cur):
            return inner_adapt(cur, win, phi, rt.psi, rt.spec)

    with enable_grad():
        target_vec = rt.target_vector(task.command, scene)
        traj = rollout(
            scene, task, theta, rt.spec, target_vec, rt.with_settings(mode="sample").settings, rt.render,
            rng=np.random.default_rng(policy_ss), adapter=adapter,
        )
        loss = navigation_loss(traj, rt.gamma, rt.beta)
        adapted = [p for _, p in traj.segments[1:]]
        capture = [t for p in adapted for t in p.values()]
        captured = backward_pass(loss, capture=capture)
    outer = [{k: captured[t._id] for k, t in p.items()} for p in adapted]
    if rt.phi_objective == "imitate":
        g_phi = phi_imitation_grad(traj.windows, rt.spec, phi, loss.item())
    else:
        g_phi = phi_meta_grad(traj.windows, outer, rt.spec, phi, rt.psi, rt.fd_eps)
    return TaskResult(theta.grads(), g_phi, loss.item(), traj.success, len(traj.steps), len(traj.windows))


def _mean(dicts: Sequence[dict]) -> dict:
    out = {}
    for k in dicts[0]:
        acc = np.zeros_like(dicts[0][k])
        for d in dicts:
            acc = acc + d[k]
        out[k] = acc / len(dicts)
    return out


def meta_outer_step(state: TrainState, batch, rt: Runtime, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, adapt: bool = True, workers: int = 1):
    """Reduce task gradients in batch order and apply one Adam step to theta and phi."""
    if not batch:
        raise ArgumentError("meta_outer_step needs a non-empty batch")
    theta_arrays = {k: v.data for k, v in state.theta.items()}
    phi_arrays = {k: v.data for k, v in state.phi.items()}
    jobs = [(theta_arrays, phi_arrays, scene, task, ss, rt, adapt) for scene, task, ss in batch]
    results: list[TaskResult] = parallel_map(task_gradients, jobs, workers)
    g_theta = _mean([r.theta_grads for r in results])
    g_phi = _mean([r.phi_grads for r in results])
    theta, adam_theta = adam_update(state.theta, g_theta, state.adam_theta, lr, betas[0], betas[1], eps)
    phi, adam_phi = adam_update(state.phi, g_phi, state.adam_phi, lr, betas[0], betas[1], eps)
    new = TrainState(theta, phi, adam_theta, adam_phi, state.outer_step + 1)
    return new, results, (g_theta, g_phi)


def make_checkpoint(cfg: RunConfig, state: TrainState) -> Checkpoint:
    return Checkpoint(to_dict(cfg), config_hash(cfg), state.outer_step, cfg.seed, state.theta, state.phi, state.adam_theta, state.adam_phi)


def train_loop(
    cfg: RunConfig,
    rt: Runtime,
    train_scenes: Sequence[GridScene],
    val_scenes: Sequence[GridScene] = (),
    out_dir: Path | None = None,
    state: TrainState | None = None,
    log=None,
) -> TrainState:
    """Run ``cfg.meta.outer_steps`` outer steps (continuing from ``state`` when given)."""
    from mvvin.env.pack import check_disjoint

    if val_scenes:
        check_disjoint(train_scenes, val_scenes)
    meta = cfg.meta
    state = state or initial_state(rt, cfg.model.init_seed)
    metrics_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics_path = Path(out_dir) / "metrics.csv"
        if not metrics_path.exists():
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)
    t0 = time.perf_counter()
    adapt = meta.adapt_in_training
    while state.outer_step < meta.outer_steps:
        batch = sample_batch(train_scenes, meta.tasks_per_step, cfg.seed, state.outer_step)
        state, results, _ = meta_outer_step(
            state, batch, rt, meta.outer_lr, (meta.adam_beta1, meta.adam_beta2), meta.adam_eps, adapt, meta.workers
        )
        loss = float(np.mean([r.loss for r in results]))
        succ = float(np.mean([r.success for r in results]))
        val_s = val_spl = ""
        if val_scenes and meta.val_every and state.outer_step % meta.val_every == 0:
            _, recs = run_evaluation(
                state.theta, state.phi, val_scenes, rt, meta.val_episodes_per_scene, adapt=True,
                seed=cfg.seed + 1_000_003, workers=meta.workers,
            )
            val_s, val_spl = success_rate(recs), spl(recs)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([state.outer_step, repr(loss), repr(succ), val_s if val_s == "" else repr(val_s),
                                         val_spl if val_spl == "" else repr(val_spl), f"{time.perf_counter() - t0:.3f}"])
        if out_dir is not None and meta.checkpoint_every and state.outer_step % meta.checkpoint_every == 0:
            save_checkpoint(make_checkpoint(cfg, state), Path(out_dir) / f"checkpoint-{state.outer_step:06d}.json")
        if log is not None:
            log(f"step {state.outer_step}: loss {loss:.4f} success {succ:.2f}" + (f" val {val_s:.3f}" if val_s != "" else ""))
    if out_dir is not None:
        save_checkpoint(make_checkpoint(cfg, state), Path(out_dir) / "checkpoint.json")
    return state
