"""Episode metrics: optimal path oracle, success rate, SPL and evaluation runs."""

from __future__ import annotations

import csv
import heapq
import json
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mvvin.autodiff import ParamSet, no_grad
from mvvin.env.scene import NAV_ACTIONS, AgentPose, GridScene, is_success, sample_task, step
from mvvin.errors import ArgumentError, UnreachableError

CSV_COLUMNS = ("scene_id", "target", "seed", "S", "L", "P", "split", "inference_seconds", "cumulative_seconds")


# ---------------------------------------------------------------- optimal paths


def _neighbours(scene: GridScene, pose: AgentPose):
    for a in NAV_ACTIONS:
        nxt, _, _ = step(scene, pose, a)
        if nxt != pose:
            yield nxt


def optimal_path_length(scene: GridScene, start: AgentPose, target: str, radius: float = 4.0) -> int:
    """Fewest non-Done actions from ``start`` to any pose that satisfies the success test."""
    if is_success(scene, start, target, radius):
        return 0
    dist = {start: 0}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        for nxt in _neighbours(scene, pose):
            if nxt in dist:
                continue
            dist[nxt] = dist[pose] + 1
            if is_success(scene, nxt, target, radius):
                return dist[nxt]
            queue.append(nxt)
    raise UnreachableError(f"{target!r} cannot be reached in scene {scene.id} from {start}")


def dijkstra_path_length(scene: GridScene, start: AgentPose, target: str, radius: float = 4.0) -> int:
    """Independent check of :func:`optimal_path_length` with a priority queue over unit edges."""
    counter = 0
    heap = [(0, counter, start.key())]
    best = {start.key(): 0}
    done = set()
    while heap:
        d, _, key = heapq.heappop(heap)
        if key in done:
            continue
        done.add(key)
        pose = AgentPose(*key)
        if is_success(scene, pose, target, radius):
            return d
        for nxt in _neighbours(scene, pose):
            nk = nxt.key()
            if d + 1 < best.get(nk, 1 << 30):
                best[nk] = d + 1
                counter += 1
                heapq.heappush(heap, (d + 1, counter, nk))
    raise UnreachableError(f"{target!r} cannot be reached in scene {scene.id} from {start}")


# ---------------------------------------------------------------- records & metrics


@dataclass(frozen=True)
class EpisodeRecord:
    S: int
    L: int
    P: int
    inference_seconds: float = 0.0
    scene_id: str = ""
    target: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.S not in (0, 1):
            raise ArgumentError(f"S must be 0 or 1, got {self.S}")
        if self.L < 0 or self.P < 0:
            raise ArgumentError(f"path lengths must be >= 0, got L={self.L}, P={self.P}")
        if self.S == 1 and self.P > self.L:
            raise ArgumentError(f"successful episode shorter than optimal: L={self.L} < P={self.P}")


def success_rate(records: Sequence[EpisodeRecord]) -> float:
    if not records:
        raise ArgumentError("success rate of an empty record set")
    return sum(r.S for r in records) / len(records)


def spl(records: Sequence[EpisodeRecord], variant: str = "standard") -> float:
    """Success weighted by path length; ``paper_literal`` uses L in the numerator."""
    if not records:
        raise ArgumentError("SPL of an empty record set")
    if variant not in ("standard", "paper_literal"):
        raise ArgumentError(f"unknown SPL variant {variant!r}")
    total = 0.0
    for r in records:
        if not r.S:
            continue
        denom = max(r.L, r.P)
        if denom == 0:
            total += 1.0
        else:
            total += (r.P if variant == "standard" else r.L) / denom
    return total / len(records)


@dataclass(frozen=True)
class SplitMetrics:
    n: int
    success_rate: float | None
    spl: float | None
    spl_paper_literal: float | None

    @classmethod
    def of(cls, records: Sequence[EpisodeRecord]) -> "SplitMetrics":
        if not records:
            return cls(0, None, None, None)
        return cls(len(records), success_rate(records), spl(records), spl(records, "paper_literal"))


@dataclass(frozen=True)
class MetricsReport:
    all: SplitMetrics
    long: SplitMetrics
    short: SplitMetrics
    long_threshold: int
    total_inference_seconds: float
    mean_inference_seconds: float

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("total_inference_seconds")
            d.pop("mean_inference_seconds")
        return d


def make_report(records: Sequence[EpisodeRecord], long_threshold: int = 5) -> MetricsReport:
    long = [r for r in records if r.P >= long_threshold]
    short = [r for r in records if r.P < long_threshold]
    total = float(sum(r.inference_seconds for r in records))
    return MetricsReport(
        all=SplitMetrics.of(records),
        long=SplitMetrics.of(long),
        short=SplitMetrics.of(short),
        long_threshold=long_threshold,
        total_inference_seconds=total,
        mean_inference_seconds=total / len(records) if records else 0.0,
    )


def format_table(report: MetricsReport) -> str:
    def cell(v):
        return "  n/a " if v is None else f"{100 * v:6.2f}"

    a, l = report.all, report.long
    lines = [
        f"{'':14s}|{'All':^17s}|{f'L>={report.long_threshold}':^17s}",
        f"{'':14s}|{'SPL':>8s}{'Success':>9s}|{'SPL':>8s}{'Success':>9s}",
        f"{'metric (%)':14s}|{cell(a.spl):>8s}{cell(a.success_rate):>9s}|{cell(l.spl):>8s}{cell(l.success_rate):>9s}",
        f"episodes: all={a.n} long={l.n}; total inference {report.total_inference_seconds:.3f}s",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- evaluation runs


def episode_seeds(seed: int, scene_index: int, episode: int) -> tuple[int, np.random.SeedSequence]:
    ss = np.random.SeedSequence([seed, scene_index, episode, 0xE7A1])
    return int(ss.generate_state(1)[0]), ss


def evaluate_episode(args):
    """One evaluation episode; a plain function so process pools can run it."""
    from mvvin.meta import inner_adapt, leaf_copy
    from mvvin.policy import rollout

    theta_arrays, phi_arrays, scene, scene_index, episode, rt, seed, adapt, mode = args
    seed_id, ss = episode_seeds(seed, scene_index, episode)
    task_ss, policy_ss = ss.spawn(2)
    task = sample_task(scene, task_ss)
    P = optimal_path_length(scene, task.start, task.target, rt.settings.success_radius_cells)
    theta = leaf_copy(theta_arrays, requires_grad=False)
    phi = leaf_copy(phi_arrays, requires_grad=False) if phi_arrays is not None else None
    adapter = None
    if adapt and phi is not None:
        def adapter(win, cur):
            return inner_adapt(cur, win, phi, rt.psi, rt.spec)

    t0 = time.perf_counter()
    with no_grad():
        target_vec = rt.target_vector(task.command, scene)
        traj = rollout(
            scene, task, theta, rt.spec, target_vec, rt.with_settings(mode=mode).settings, rt.render,
            rng=np.random.default_rng(policy_ss), adapter=adapter,
        )
    elapsed = time.perf_counter() - t0
    return EpisodeRecord(int(traj.success), traj.path_length, P, elapsed, scene.id, task.target, seed_id)


def run_evaluation(
    theta: ParamSet,
    phi: ParamSet | None,
    scenes: Sequence[GridScene],
    rt,
    episodes_per_scene: int,
    adapt: bool = True,
    seed: int = 0,
    mode: str = "argmax",
    long_threshold: int = 5,
    workers: int = 1,
    train_scenes: Sequence[GridScene] = (),
) -> tuple[MetricsReport, list[EpisodeRecord]]:
    from mvvin.env.pack import check_disjoint

    if train_scenes:
        check_disjoint(train_scenes, scenes)
    theta_arrays = {k: v.data for k, v in theta.items()}
    phi_arrays = {k: v.data for k, v in phi.items()} if phi is not None else None
    jobs = [
        (theta_arrays, phi_arrays, scene, si, ep, rt, seed, adapt, mode)
        for si, scene in enumerate(scenes)
        for ep in range(episodes_per_scene)
    ]
    records = parallel_map(evaluate_episode, jobs, workers)
    return make_report(records, long_threshold), records


def parallel_map(fn, jobs: list, workers: int) -> list:
    """Ordered map; results come back in job order whatever the worker count."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        return pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers)))


# ---------------------------------------------------------------- emission


def emit_metrics(report: MetricsReport | None, records: Sequence[EpisodeRecord], csv_path, json_path=None, append: bool = False) -> None:
    csv_path = Path(csv_path)
    exists = append and csv_path.exists() and csv_path.stat().st_size > 0
    cumulative = 0.0
    if exists:
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            cumulative = float(rows[-1]["cumulative_seconds"])
    threshold = report.long_threshold if report is not None else 5
    with open(csv_path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not exists:
            w.writerow(CSV_COLUMNS)
        for r in records:
            cumulative += r.inference_seconds
            split = "long" if r.P >= threshold else "short"
            w.writerow([r.scene_id, r.target, r.seed, r.S, r.L, r.P, split, repr(r.inference_seconds), repr(cumulative)])
    if json_path is not None and report is not None:
        Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_records_csv(path) -> list[EpisodeRecord]:
    with open(path) as fh:
        return [
            EpisodeRecord(int(row["S"]), int(row["L"]), int(row["P"]), float(row["inference_seconds"]), row["scene_id"], row["target"], int(row["seed"]))
            for row in csv.DictReader(fh)
        ]
