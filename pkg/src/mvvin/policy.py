"""Step encoder, LSTM memory and actor-critic heads, plus episode rollouts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mvvin.autodiff import ParamSet, Tensor, ops
from mvvin.autodiff.params import he_scaled_init
from mvvin.env.render import Observation, RenderSpec, render_observation
from mvvin.env.scene import NUM_ACTIONS, Action, AgentPose, GridScene, Task, is_success, step
from mvvin.errors import ArgumentError, ShapeError
from mvvin.perception import (
    ALWAYS_ON,
    ATensor,
    ProcessorSpec,
    RegionSet,
    aggregate,
    attention_param_shapes,
    init_weights,
    linear_chain,
    param_seed,
    process,
    process_proposals,
    region_self_attention,
)


@dataclass(frozen=True)
class NetworkSpec:
    modalities: tuple[str, ...]
    processors: dict
    attention_hidden: int
    aggregate_channels: int
    hidden_size: int
    grid: tuple[int, int] = (7, 7)
    head_gain: float = 0.1

    @property
    def order(self) -> tuple[str, ...]:
        """Aggregation order: enabled visual modalities, then target and previous action."""
        return self.modalities + ALWAYS_ON

    def out_channels(self, name: str) -> int:
        return self.processors[name].out_shape[0]

    @property
    def aggregate_in(self) -> int:
        return sum(self.out_channels(n) for n in self.order)

    @property
    def embed_dim(self) -> int:
        return self.aggregate_channels * self.grid[0] * self.grid[1]

    @property
    def lstm_in(self) -> int:
        return self.embed_dim + self.out_channels("action")

    def validate(self) -> None:
        for name in self.order:
            spec = self.processors[name]
            out = spec.out_shape
            if spec.kind == "conv" and out[1:] != self.grid:
                raise ShapeError(f"{name}: conv chain ends at {out}, expected grid {self.grid}")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...], int]]:
        shapes = []
        for name in self.order:
            spec = self.processors[name]
            prefix = f"{name}.value." if name == "region_feature" else f"{name}."
            shapes += [(prefix + n, s, f) for n, s, f in spec.param_shapes()]
            if name == "region_feature":
                shapes += [(f"{name}.{n}", s, f) for n, s, f in attention_param_shapes(spec, self.attention_hidden)]
        cin, cout, n = self.aggregate_in, self.aggregate_channels, self.hidden_size
        shapes += [("agg.w", (cout, cin, 1, 1), cin), ("agg.b", (cout,), cin)]
        shapes += [("lstm.w_ih", (self.lstm_in, 4 * n), self.lstm_in), ("lstm.w_hh", (n, 4 * n), n), ("lstm.b", (4 * n,), n)]
        shapes += [("policy.w", (n, NUM_ACTIONS), n), ("policy.b", (NUM_ACTIONS,), n)]
        shapes += [("value.w", (n, 1), n), ("value.b", (1,), n)]
        return shapes


def network_spec_from_config(cfg) -> NetworkSpec:
    e, m = cfg.env, cfg.modalities
    grid = tuple(m.grid)
    inputs = {
        "rgb": tuple(e.rgb_shape),
        "depth": (1,) + tuple(e.depth_shape),
        "segmentation": (e.seg_dim,),
        "region_feature": (e.region_dim,),
        "region_proposal": (4,),
        "target": (cfg.model.target_dim,),
        "action": (NUM_ACTIONS,),
    }
    procs = {}
    for name, in_shape in inputs.items():
        pc = getattr(m, name)
        procs[name] = ProcessorSpec(name, pc.kind, in_shape, tuple(tuple(layer) for layer in pc.layers))
    spec = NetworkSpec(
        modalities=tuple(m.enabled),
        processors=procs,
        attention_hidden=m.attention_hidden,
        aggregate_channels=m.aggregate_channels,
        hidden_size=cfg.model.hidden_size,
        grid=grid,
        head_gain=cfg.model.head_gain,
    )
    spec.validate()
    return spec


def init_network(spec: NetworkSpec, seed: int) -> ParamSet:
    """He-scaled ReLU layers; LSTM with unit gain and forget bias 1; small heads."""
    params = ParamSet()
    n = spec.hidden_size
    for name, shape, fan in spec.param_shapes():
        rng = np.random.default_rng(param_seed(seed, name))
        last = name.split(".")[-1]
        if name == "lstm.b":
            b = np.zeros(shape)
            b[n : 2 * n] = 1.0
            params[name] = Tensor(b, requires_grad=True)
        elif last.startswith("b"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        elif name.startswith("lstm."):
            params[name] = he_scaled_init(shape, fan, rng, gain=1.0)
        elif name.startswith(("policy.", "value.")):
            params[name] = he_scaled_init(shape, fan, rng, gain=spec.head_gain)
        else:
            params[name] = he_scaled_init(shape, fan, rng)
    return params


# ---------------------------------------------------------------- per step


@dataclass
class MemoryState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, n: int) -> "MemoryState":
        return cls(Tensor(np.zeros(n)), Tensor(np.zeros(n)))

    def detached(self) -> "MemoryState":
        return MemoryState(self.h.detach(), self.c.detach())


@dataclass
class PolicyOutput:
    logits: Tensor
    value: Tensor

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        p = np.exp(z)
        return p / p.sum()


@dataclass
class StepEncoding:
    e: Tensor
    scores: np.ndarray
    region_labels: tuple[str, ...]
    region_boxes: np.ndarray


def one_hot(action: Action | int | None) -> np.ndarray:
    v = np.zeros(NUM_ACTIONS)
    if action is not None:
        v[int(action)] = 1.0
    return v


def action_atensor(prev_action, params: ParamSet, spec: NetworkSpec) -> ATensor:
    """Previous action through its processor; the start step feeds a zero vector."""
    return process(Tensor(one_hot(prev_action)), spec.processors["action"], params.subset("action"))


def encode(params: ParamSet, spec: NetworkSpec, obs: Observation, target_vec: np.ndarray, prev_action) -> StepEncoding:
    atensors = []
    scores = np.zeros(0)
    regions = RegionSet.from_regions(obs.regions, spec.processors["region_feature"].in_shape[0])
    for name in spec.order:
        proc = spec.processors[name]
        if name == "region_feature":
            if len(regions):
                at, scores = region_self_attention(regions, proc, params.subset(name))
            else:
                at = ATensor("vector", Tensor(np.zeros(proc.out_shape[0])))
        elif name == "region_proposal":
            at = process_proposals(regions, proc, params.subset(name))
        elif name == "action":
            at = action_atensor(prev_action, params, spec)
        else:
            raw = {"rgb": obs.rgb_feat, "depth": obs.depth_map, "segmentation": obs.seg_feat, "target": target_vec}[name]
            at = process(Tensor(raw), proc, params.subset(name))
        atensors.append(at)
    e = aggregate(atensors, params["agg.w"], params["agg.b"], spec.grid)
    return StepEncoding(e, scores, regions.labels, regions.boxes)


def memory_step(e: Tensor, prev_action, state: MemoryState, params: ParamSet, spec: NetworkSpec) -> tuple[PolicyOutput, MemoryState]:
    if e.shape != (spec.embed_dim,):
        raise ShapeError(f"embedding has shape {e.shape}, expected ({spec.embed_dim},)")
    act = action_atensor(prev_action, params, spec).payload
    x = ops.concat([e, act], axis=0)
    h, c = ops.lstm_cell_apply(x, state.h, state.c, params.subset("lstm"))
    logits = ops.linear_apply(h, params["policy.w"], params["policy.b"], activate=False)
    value = ops.linear_apply(h, params["value.w"], params["value.b"], activate=False)
    return PolicyOutput(logits, value), MemoryState(h, c)


def select_action(policy: PolicyOutput, mode: str, rng: np.random.Generator | None = None) -> Action:
    """``argmax`` (ties to the lowest index), ``sample`` from softmax, or ``uniform``."""
    if mode == "argmax":
        return Action(int(np.argmax(policy.logits.data)))
    if rng is None:
        raise ArgumentError(f"mode {mode!r} needs a random generator")
    if mode == "sample":
        cdf = np.cumsum(policy.probs())
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return Action(min(idx, NUM_ACTIONS - 1))
    if mode == "uniform":
        return Action(int(rng.integers(NUM_ACTIONS)))
    raise ArgumentError(f"unknown action selection mode {mode!r}")


# ---------------------------------------------------------------- episodes


@dataclass
class StepRecord:
    t: int
    pose: AgentPose
    obs: Observation
    prev_action: Action | None
    h: Tensor
    logits: Tensor
    value: Tensor
    action: Action
    reward: float
    collided: bool
    scores: np.ndarray
    region_labels: tuple[str, ...]
    region_boxes: np.ndarray
    segment: int


@dataclass
class Window:
    """What test-time adaptation may see: no rewards, no success signal."""

    params: dict  # name -> array, the parameters the window ran under
    init_h: np.ndarray
    init_c: np.ndarray
    target_vec: np.ndarray
    obs: list
    prev_actions: list
    actions: list


@dataclass
class Trajectory:
    scene_id: str
    task: Task
    steps: list[StepRecord]
    success: bool
    done_signaled: bool
    segments: list  # (start_step, ParamSet)
    windows: list = field(default_factory=list)
    inference_seconds: float = 0.0

    @property
    def path_length(self) -> int:
        return sum(1 for s in self.steps if s.action is not Action.Done)

    @property
    def truncated(self) -> bool:
        return not self.done_signaled

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    def action_log_prob(self) -> float:
        total = 0.0
        for s in self.steps:
            z = s.logits.data - s.logits.data.max()
            total += float(z[int(s.action)] - np.log(np.exp(z).sum()))
        return total


Adapter = Callable[[Window, ParamSet], ParamSet]


@dataclass(frozen=True)
class RolloutSettings:
    max_steps: int = 100
    mode: str = "argmax"
    k: int = 6
    readapt: bool = True
    reward_step: float = -0.01
    reward_success: float = 5.0
    success_radius_cells: float = 4.0
    encoder_seed: int = 0


def rollout(
    scene: GridScene,
    task: Task,
    params: ParamSet,
    spec: NetworkSpec,
    target_vec: np.ndarray,
    settings: RolloutSettings,
    render_spec: RenderSpec = RenderSpec(),
    rng: np.random.Generator | None = None,
    adapter: Adapter | None = None,
    script: Sequence[Action] | None = None,
) -> Trajectory:
    """Run one episode; ``adapter`` swaps in adapted parameters after every k steps."""
    import time

    if settings.max_steps < 1:
        raise ArgumentError("max_steps must be >= 1")
    t0 = time.perf_counter()
    state = MemoryState.zeros(spec.hidden_size)
    pose, prev = task.start, None
    current, seg = params, 0
    segments = [(0, params)]
    windows: list[Window] = []
    records: list[StepRecord] = []
    win_start = (state.h.data, state.c.data)
    success = done = False
    for t in range(settings.max_steps):
        obs = render_observation(scene, pose, settings.encoder_seed, render_spec)
        enc = encode(current, spec, obs, target_vec, prev)
        out, new_state = memory_step(enc.e, prev, state, current, spec)
        if script is not None:
            action = Action(script[t]) if t < len(script) else Action.Done
        else:
            action = select_action(out, settings.mode, rng)
        new_pose, collided, done = step(scene, pose, action)
        success = done and is_success(scene, pose, task.target, settings.success_radius_cells)
        reward = settings.reward_step + (settings.reward_success if success else 0.0)
        records.append(
            StepRecord(t, pose, obs, prev, new_state.h, out.logits, out.value, action, reward, collided,
                       enc.scores, enc.region_labels, enc.region_boxes, seg)
        )
        if done:
            break
        state, prev, pose = new_state, action, new_pose
        boundary = (t + 1) % settings.k == 0 and (settings.readapt or seg == 0)
        if adapter is not None and boundary and t + 1 < settings.max_steps:
            recent = records[-settings.k :]
            win = Window(
                params={k: v.data for k, v in current.items()},
                init_h=win_start[0],
                init_c=win_start[1],
                target_vec=target_vec,
                obs=[r.obs for r in recent],
                prev_actions=[r.prev_action for r in recent],
                actions=[r.action for r in recent],
            )
            windows.append(win)
            current = adapter(win, current)
            seg += 1
            segments.append((t + 1, current))
            win_start = (state.h.data, state.c.data)
        elif (t + 1) % settings.k == 0:
            win_start = (state.h.data, state.c.data)
    return Trajectory(scene.id, task, records, success, done, segments, windows, time.perf_counter() - t0)


def replay(traj_like, params: ParamSet, spec: NetworkSpec, init: MemoryState | None = None):
    """Recompute (h, logits, value) for fixed observations and actions under ``params``.

    ``traj_like`` provides ``obs``, ``prev_actions`` and ``target_vec``.
    """
    state = init or MemoryState.zeros(spec.hidden_size)
    hs, logits, values = [], [], []
    for obs, prev in zip(traj_like.obs, traj_like.prev_actions):
        enc = encode(params, spec, obs, traj_like.target_vec, prev)
        out, state = memory_step(enc.e, prev, state, params, spec)
        hs.append(state.h)
        logits.append(out.logits)
        values.append(out.value)
    return hs, logits, values, state


# ---------------------------------------------------------------- traces


def write_trace(traj: Trajectory, path, extra: dict | None = None) -> None:
    """JSONL: one header line, then one line per step."""
    header = {
        "type": "header",
        "scene_id": traj.scene_id,
        "command": traj.task.command,
        "target": traj.task.target,
        "start": [traj.task.start.x, traj.task.start.y, traj.task.start.heading, traj.task.start.pitch],
        "steps": len(traj.steps),
        "success": traj.success,
        "path_length": traj.path_length,
        **(extra or {}),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in traj.steps:
            top = None
            if len(s.scores):
                i = int(np.argmax(s.scores))
                top = {"label": s.region_labels[i], "box": [float(v) for v in s.region_boxes[i]], "score": float(s.scores[i])}
            line = {
                "t": s.t,
                "pose": [s.pose.x, s.pose.y, s.pose.heading, s.pose.pitch],
                "action": s.action.name,
                "reward": s.reward,
                "collided": s.collided,
                "value": float(s.value.data[0]),
                "probs": [float(p) for p in PolicyOutput(s.logits, s.value).probs()],
                "attention": {"labels": list(s.region_labels), "scores": [float(v) for v in s.scores]},
                "top_region": top,
                "segment": s.segment,
            }
            fh.write(json.dumps(line) + "\n")


def trajectory_log_prob_check(traj: Trajectory) -> tuple[float, float]:
    """(product of per-step probabilities, exp of summed log-probabilities)."""
    prod = 1.0
    for s in traj.steps:
        prod *= float(PolicyOutput(s.logits, s.value).probs()[int(s.action)])
    return prod, math.exp(traj.action_log_prob())
