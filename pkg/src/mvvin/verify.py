"""Oracle checks behind ``mvvin verify``; each returns a :class:`Check`."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mvvin import config as config_mod
from mvvin.autodiff import ParamSet, Tensor, no_grad, ops
from mvvin.errors import MvvinError, ShapeError

FULL_SHAPES = {
    "rgb": ((512, 7, 7), (64, 7, 7)),
    "depth": ((1, 384, 512), (64, 7, 7)),
    "segmentation": ((2048,), (64,)),
    "region_feature": ((2048,), (64,)),
    "region_proposal": ((4,), (10,)),
    "target": ((300,), (64,)),
    "action": ((6,), (10,)),
}
FULL_AGGREGATE = ((64, 7, 7), 3136)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except (MvvinError, ValueError, RuntimeError) as exc:
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, ok, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- shapes


def processor_shapes(cfg) -> dict[str, tuple[tuple, tuple]]:
    """Run every processor once on a rendered observation; report (input, output) shapes."""
    from mvvin.env.render import render_observation
    from mvvin.env.scene import AgentPose, scene_from_rows
    from mvvin.perception import RegionSet, aggregate, process, process_proposals, region_self_attention
    from mvvin.policy import action_atensor, init_network
    from mvvin.runtime import build_runtime

    rt = build_runtime(cfg)
    spec = rt.spec
    params = init_network(spec, 0)
    scene = scene_from_rows(["#######", "#.....#", "#..m..#", "#.t...#", "#######"], {"m": "microwave", "t": "toaster"})
    obs = render_observation(scene, AgentPose(1, 1, 1), spec=rt.render)
    regions = RegionSet.from_regions(obs.regions, spec.processors["region_feature"].in_shape[0])
    if not len(regions):
        raise RuntimeError("shape probe scene shows no regions")
    out = {}
    with no_grad():
        raw = {"rgb": obs.rgb_feat, "depth": obs.depth_map[None], "segmentation": obs.seg_feat, "target": rt.table.vector("microwave")}
        ats = []
        for name in spec.order:
            proc = spec.processors[name]
            sub = params.subset(name)
            if name == "region_feature":
                at, _ = region_self_attention(regions, proc, sub)
                shape_in = (regions.features.shape[1],)
            elif name == "region_proposal":
                at = process_proposals(regions, proc, sub)
                shape_in = (4,)
            elif name == "action":
                at = action_atensor(None, params, spec)
                shape_in = (6,)
            else:
                at = process(Tensor(raw[name]), proc, sub)
                shape_in = raw[name].shape
            out[name] = (tuple(shape_in), at.payload.shape)
            ats.append(at)
        mixed = aggregate(ats, params["agg.w"], params["agg.b"], spec.grid)
        out["aggregate"] = ((spec.aggregate_channels,) + spec.grid, mixed.shape)
    return out


def check_full_shapes(cfg=None) -> tuple[bool, str]:
    cfg = cfg or config_mod.load("paper-shapes")
    got = processor_shapes(cfg)
    bad = []
    for name, (shape_in, shape_out) in FULL_SHAPES.items():
        if name not in got:
            bad.append(f"{name}: missing")
        elif got[name] != (shape_in, shape_out):
            bad.append(f"{name}: {got[name][0]}->{got[name][1]}, expected {shape_in}->{shape_out}")
    agg = got.get("aggregate")
    if agg is None or agg[0] != FULL_AGGREGATE[0] or agg[1] != (FULL_AGGREGATE[1],):
        bad.append(f"aggregate: {agg}, expected {FULL_AGGREGATE}")
    return not bad, "; ".join(bad) or "every full-size processor shape matches"


def check_desk_shapes(cfg=None) -> tuple[bool, str]:
    cfg = cfg or config_mod.load("desk-mini")
    got = processor_shapes(cfg)
    grid = tuple(cfg.modalities.grid)
    bad = [f"{n}: {o}" for n, (_, o) in got.items() if n in ("rgb", "depth") and o[1:] != grid]
    return not bad, "; ".join(bad) or f"desk chains land on {grid}; embedding {got['aggregate'][1]}"


# ---------------------------------------------------------------- attention


def check_attention(instances: int = 50, seed: int = 0) -> tuple[bool, str]:
    """Scores sum to one, pooling is bit-invariant under region permutation, 7 copies score 1/7 each."""
    from mvvin.perception import ProcessorSpec, RegionSet, attention_param_shapes, init_weights, region_self_attention

    spec = ProcessorSpec("region_feature", "linear", (6,), ((5,),))
    rng = np.random.default_rng(seed)
    worst_sum, perm_bad, sym_bad = 0.0, 0, 0
    for i in range(instances):
        shapes = [("value." + n, s, f) for n, s, f in spec.param_shapes()] + attention_param_shapes(spec, 4)
        params = init_weights(shapes, seed + i)
        n = int(rng.integers(1, 8))
        regs = RegionSet(rng.normal(size=(n, 6)), rng.uniform(0.1, 0.9, size=(n, 4)), rng.uniform(0.2, 1.0, size=n))
        pooled, scores = region_self_attention(regs, spec, params)
        worst_sum = max(worst_sum, abs(float(scores.sum()) - 1.0))
        perm = rng.permutation(n)
        shuffled = RegionSet(regs.features[perm], regs.boxes[perm], regs.confidences[perm])
        pooled2, _ = region_self_attention(shuffled, spec, params)
        perm_bad += pooled.payload.data.tobytes() != pooled2.payload.data.tobytes()
        same = RegionSet(np.tile(regs.features[0], (7, 1)), np.tile(regs.boxes[0], (7, 1)), np.full(7, regs.confidences[0]))
        _, sym = region_self_attention(same, spec, params)
        sym_bad += not np.all(sym == 1.0 / 7.0)
    ok = worst_sum <= 1e-6 and perm_bad == 0 and sym_bad == 0
    return ok, (f"{instances} instances: max |sum-1| {worst_sum:.1e}, permutation mismatches {perm_bad}, "
                f"non-uniform 7-copy scores {sym_bad}")


# ---------------------------------------------------------------- metrics

# (S, L, P) rows with success rate, standard SPL and L-numerator SPL worked out by hand
METRIC_CASES = [
    ([(1, 4, 4), (1, 6, 3), (0, 10, 5), (1, 2, 2)], 0.75, 0.625, 0.75),
    ([(0, 3, 2)], 0.0, 0.0, 0.0),
    ([(1, 0, 0)], 1.0, 1.0, 1.0),
    ([(1, 5, 5)] * 3, 1.0, 1.0, 1.0),
    ([(1, 8, 2), (0, 1, 1)], 0.5, 0.125, 0.5),
    ([(1, 3, 1), (1, 6, 2), (1, 9, 3)], 1.0, 1 / 3, 1.0),
    ([(0, 40, 7)] * 4 + [(1, 7, 7)], 0.2, 0.2, 0.2),
    ([(1, 10, 4), (1, 4, 4), (0, 2, 9), (0, 0, 3)], 0.5, 0.35, 0.5),
    ([(1, 0, 0), (0, 0, 0)], 0.5, 0.5, 0.5),
    ([(1, 16, 4), (1, 12, 3), (1, 20, 5), (0, 4, 4), (0, 4, 4), (1, 1, 1), (0, 9, 2), (1, 2, 1)], 0.625, 0.28125, 0.625),
]


def check_metric_cases() -> tuple[bool, str]:
    from mvvin.evaluation import EpisodeRecord, spl, success_rate

    bad = []
    for i, (rows, s, p, lit) in enumerate(METRIC_CASES):
        recs = [EpisodeRecord(*r) for r in rows]
        got = (success_rate(recs), spl(recs), spl(recs, "paper_literal"))
        if got != (s, p, lit):
            bad.append(f"set {i}: got {got}, want {(s, p, lit)}")
    return not bad, "; ".join(bad) or f"{len(METRIC_CASES)} hand-computed record sets match exactly"


def check_optimal_lower_bound(episodes: int = 1000, seed: int = 0, max_len: int = 40) -> tuple[bool, str]:
    """Random walks that reach a success pose are never shorter than the BFS optimum."""
    from mvvin.env.pack import bundled_pack_root, load_split
    from mvvin.env.scene import NAV_ACTIONS, is_success, sample_task, step
    from mvvin.evaluation import optimal_path_length

    scenes = load_split(bundled_pack_root(), "train")
    rng = np.random.default_rng(seed)
    reached = violations = 0
    for n in range(episodes):
        scene = scenes[n % len(scenes)]
        task = sample_task(scene, [seed, n, 0x5B1])
        P = optimal_path_length(scene, task.start, task.target)
        pose, L = task.start, 0
        while not is_success(scene, pose, task.target) and L < max_len:
            pose, _, _ = step(scene, pose, NAV_ACTIONS[int(rng.integers(len(NAV_ACTIONS)))])
            L += 1
        if is_success(scene, pose, task.target):
            reached += 1
            violations += P > L
    return violations == 0, f"{episodes} random episodes, {reached} reached the target, {violations} with L < P"


# ---------------------------------------------------------------- optimal paths


def check_bfs_dijkstra(n_scenes: int = 20, starts_per_scene: int = 5, seed: int = 0) -> tuple[bool, str]:
    from mvvin.env.pack import bundled_pack_root, load_split
    from mvvin.env.scene import sample_task
    from mvvin.evaluation import dijkstra_path_length, optimal_path_length

    scenes = load_split(bundled_pack_root(), "train")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(scenes), size=n_scenes, replace=False)
    mismatches = 0
    total = 0
    for si in picks:
        scene = scenes[int(si)]
        for j in range(starts_per_scene):
            task = sample_task(scene, [seed, int(si), j])
            a = optimal_path_length(scene, task.start, task.target)
            b = dijkstra_path_length(scene, task.start, task.target)
            total += 1
            mismatches += a != b
    return mismatches == 0, f"{total - mismatches}/{total} start states agree over {n_scenes} scenes"


# ---------------------------------------------------------------- meta-gradients


def toy_meta_gradients(theta0: float = 1.0, psi: float = 0.1) -> tuple[float, float]:
    """First-order and finite-difference meta-gradients for L_int = theta^2/2, L_nav = (theta - 1)^2/2."""
    from mvvin.meta import exact_meta_gradient_oracle, first_order_meta_grad

    params = ParamSet({"theta": Tensor([theta0])})

    def inner(p):
        return ops.mul(ops.square(p["theta"]), 0.5)

    def outer(_, adapted):
        return ops.mul(ops.square(ops.sub(adapted["theta"], 1.0)), 0.5)

    fo = first_order_meta_grad(params, inner, outer, psi)["theta"].item()
    exact = exact_meta_gradient_oracle(params, inner, outer, psi, h=1e-5)["theta"].item()
    return fo, exact


def check_meta_toy() -> tuple[bool, str]:
    fo, exact = toy_meta_gradients()
    ok = abs(fo + 0.1) <= 1e-6 and abs(exact + 0.09) <= 1e-6
    return ok, f"first-order {fo:.9f} (want -0.1), oracle {exact:.9f} (want -0.09)"


def _trial_episode(seed: int, rt, scenes, attempt: int):
    from mvvin.env.scene import NAV_ACTIONS, Action, sample_task
    from mvvin.meta import FixedEpisode, init_phi
    from mvvin.policy import init_network, rollout

    rng = np.random.default_rng([seed, attempt, 0x516])
    scene = scenes[int(rng.integers(len(scenes)))]
    task = sample_task(scene, rng)
    theta = init_network(rt.spec, seed)
    # zero biases on all-zero inputs sit exactly on a ReLU kink
    theta = theta.map(lambda k, v: Tensor(v.data + rng.normal(0, 0.1, v.shape), requires_grad=True) if k.endswith(".b") else v)
    phi = init_phi(rt.phi_spec, seed)
    script = [NAV_ACTIONS[int(a)] for a in rng.integers(len(NAV_ACTIONS), size=rt.settings.max_steps - 1)] + [Action.Done]
    target_vec = rt.target_vector(task.command, scene)
    with no_grad():
        traj = rollout(scene, task, theta, rt.spec, target_vec, rt.settings, rt.render, script=script)
    return theta, phi, FixedEpisode.from_trajectory(traj, target_vec, rt.settings.k, rt.settings.readapt)


def sign_trial(seed: int, cfg=None, h: float = 1e-5, min_margin: float = 1e-3):
    """One first-order vs oracle comparison on the micro network; returns (inner product, rel. error).

    The episode is a random action script replayed with adaptation every k
    steps; instances with a ReLU pre-activation within ``min_margin`` of zero
    are redrawn.
    """
    from mvvin.meta import episode_exact_oracle, episode_first_order_grad
    from mvvin.runtime import build_runtime, load_scenes

    cfg = cfg or config_mod.load("micro")
    rt = build_runtime(cfg)
    scenes = load_scenes(cfg, "train")
    for attempt in range(100):
        theta, phi, ep = _trial_episode(seed, rt, scenes, attempt)
        with ops.relu_margin() as margin:
            fo = episode_first_order_grad(theta, ep, rt.spec, phi, rt.psi, rt.gamma, rt.beta)
        if margin[0] > min_margin:
            break
    else:
        raise RuntimeError(f"no kink-free instance for seed {seed}")
    ex = episode_exact_oracle(theta, ep, rt.spec, phi, rt.psi, rt.gamma, rt.beta, h=h)
    a = np.concatenate([fo[k].ravel() for k in theta.names()])
    b = np.concatenate([ex[k].ravel() for k in theta.names()])
    return float(a @ b), float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_meta_sign(trials: int = 50, need: float = 0.9) -> tuple[bool, str]:
    cfg = config_mod.load("micro")
    from mvvin.runtime import build_runtime

    n_params = sum(int(np.prod(shape)) for _, shape, _ in build_runtime(cfg).spec.param_shapes())
    results = [sign_trial(s, cfg) for s in range(trials)]
    agree = sum(ip > 0 for ip, _ in results)
    rel = np.median([r for _, r in results])
    return agree >= need * trials, f"{agree}/{trials} positive inner products on a {n_params}-parameter net; median relative error {rel:.3g}"


def collapse_step(cfg=None, seed: int = 0):
    """One outer step with psi = 0 through the meta path and through the plain actor-critic path."""
    from mvvin.runtime import build_runtime, load_scenes
    from mvvin.train import initial_state, meta_outer_step, sample_batch

    cfg = cfg or config_mod.load("micro")
    rt = build_runtime(cfg)
    from dataclasses import replace

    rt0 = replace(rt, psi=0.0)
    scenes = load_scenes(cfg, "train")
    batch = sample_batch(scenes, 3, seed, 0)
    state = initial_state(rt0, seed)
    meta_state, _, meta_grads = meta_outer_step(state, batch, rt0, 1e-3, adapt=True)
    plain_state, _, plain_grads = meta_outer_step(state, batch, rt0, 1e-3, adapt=False)
    return meta_state, plain_state, meta_grads, plain_grads


def check_meta_collapse() -> tuple[bool, str]:
    meta_state, plain_state, (gt, gp), _ = collapse_step(config_mod.load("micro", {"env.max_steps": 20}))
    same_theta = meta_state.theta.bit_equal(plain_state.theta)
    phi_zero = all(not np.any(v) for v in gp.values())
    same_phi = meta_state.phi.bit_equal(plain_state.phi)
    return same_theta and phi_zero and same_phi, f"theta bit-equal: {same_theta}; phi gradient zero: {phi_zero}; phi unchanged: {same_phi}"


# ---------------------------------------------------------------- suite


def check_gradients(instances: int = 20) -> tuple[bool, str]:
    from mvvin.gradsuite import TOLERANCE, run_suite

    res = run_suite(instances)
    bad = [f"{r.name} ({r.worst:.2e})" for r in res if not r.ok]
    worst = max(r.worst for r in res)
    return not bad, ("failing: " + ", ".join(bad)) if bad else f"{len(res)} cases x {instances} instances, worst {worst:.2e} < {TOLERANCE}"


def run_all(quick: bool = False, full: bool = False) -> list[Check]:
    """Default budget stays under five minutes on one core; ``full`` runs 50 sign trials."""
    trials = 5 if quick else 50 if full else 20
    return [
        _timed("gradients", lambda: check_gradients(5 if quick else 20)),
        _timed("full_shapes", check_full_shapes),
        _timed("desk_shapes", check_desk_shapes),
        _timed("attention", check_attention),
        _timed("metric_cases", check_metric_cases),
        _timed("optimal_lower_bound", lambda: check_optimal_lower_bound(200 if quick else 1000)),
        _timed("bfs_vs_dijkstra", check_bfs_dijkstra),
        _timed("meta_toy", check_meta_toy),
        _timed("meta_collapse", check_meta_collapse),
        _timed("meta_sign_agreement", lambda: check_meta_sign(trials)),
    ]


def format_checks(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'check':{width}s}  result  time    detail"]
    for c in checks:
        lines.append(f"{c.name:{width}s}  {'PASS' if c.ok else 'FAIL':6s}  {c.seconds:6.1f}s  {c.detail}")
    return "\n".join(lines)
