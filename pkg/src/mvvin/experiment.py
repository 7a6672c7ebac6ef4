"""Seeded learning experiment: adaptation on/off and multimodal versus RGB-only, on held-out scenes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from mvvin import config
from mvvin.evaluation import run_evaluation
from mvvin.runtime import build_runtime, load_disjoint
from mvvin.train import train_loop

MULTIMODAL = ["rgb", "segmentation"]
BASELINE = ["rgb"]


@dataclass
class SeedResult:
    seed: int
    adapt: float
    no_adapt: float
    baseline: float
    seconds: float

    @property
    def adaptation_helps(self) -> bool:
        return self.adapt > self.no_adapt

    @property
    def multimodal_helps(self) -> bool:
        return self.adapt > self.baseline


@dataclass
class AblationResult:
    seeds: list[SeedResult] = field(default_factory=list)

    @property
    def adaptation_wins(self) -> int:
        return sum(r.adaptation_helps for r in self.seeds)

    @property
    def multimodal_wins(self) -> int:
        return sum(r.multimodal_helps for r in self.seeds)

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.seeds)

    def table(self) -> str:
        lines = ["seed  adapt  no-adapt  rgb-only  seconds"]
        for r in self.seeds:
            lines.append(f"{r.seed:4d}  {r.adapt:5.3f}  {r.no_adapt:8.3f}  {r.baseline:8.3f}  {r.seconds:7.1f}")
        lines.append(f"adaptation better in {self.adaptation_wins}/{len(self.seeds)}, "
                     f"multimodal better in {self.multimodal_wins}/{len(self.seeds)}, total {self.seconds:.0f}s")
        return "\n".join(lines)


def seed_configs(seed: int, preset: str = "desk-experiment", overrides: dict | None = None):
    """The multimodal and RGB-only configs for one seed (same everything else)."""
    ov = {**(overrides or {}), "seed": seed, "model.init_seed": seed}
    return (
        config.load(preset, {**ov, "modalities.enabled": MULTIMODAL}),
        config.load(preset, {**ov, "modalities.enabled": BASELINE}),
    )


def _train_and_score(cfg, adapt_modes, log=None):
    rt = build_runtime(cfg)
    train, held_out = load_disjoint(cfg, "train", cfg.eval.split)
    state = train_loop(cfg, rt, train, log=log)
    out = []
    for adapt in adapt_modes:
        report, _ = run_evaluation(
            state.theta, state.phi, held_out, rt, cfg.eval.episodes_per_scene, adapt=adapt,
            seed=cfg.seed + 1_000_003, mode=cfg.eval.mode, workers=cfg.eval.workers, train_scenes=train,
        )
        out.append(report.all.success_rate)
    return out


def run_seed(seed: int, preset: str = "desk-experiment", overrides: dict | None = None, log=None) -> SeedResult:
    t0 = time.perf_counter()
    multi, rgb = seed_configs(seed, preset, overrides)
    adapt, no_adapt = _train_and_score(multi, (True, False), log)
    (baseline,) = _train_and_score(rgb, (True,), log)
    return SeedResult(seed, adapt, no_adapt, baseline, time.perf_counter() - t0)


def run_ablation(seeds=range(5), preset: str = "desk-experiment", overrides: dict | None = None, log=None) -> AblationResult:
    res = AblationResult()
    for s in seeds:
        res.seeds.append(run_seed(s, preset, overrides, log))
        if log is not None:
            log(res.table().splitlines()[-2])
    return res
