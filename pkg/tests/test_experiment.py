from __future__ import annotations

from mvvin.experiment import AblationResult, SeedResult, run_seed, seed_configs


def test_seed_configs_differ_only_in_modalities():
    multi, rgb = seed_configs(4, "desk-experiment")
    assert multi.modalities.enabled == ["rgb", "segmentation"]
    assert rgb.modalities.enabled == ["rgb"]
    assert multi.seed == rgb.seed == multi.model.init_seed == 4
    assert multi.meta == rgb.meta and multi.env == rgb.env


def test_counts_use_strict_comparisons():
    res = AblationResult([SeedResult(0, 0.2, 0.2, 0.1, 1.0), SeedResult(1, 0.3, 0.1, 0.3, 2.0), SeedResult(2, 0.1, 0.0, 0.0, 3.0)])
    assert res.adaptation_wins == 2
    assert res.multimodal_wins == 2
    assert res.seconds == 6.0
    assert "2/3" in res.table()


def test_tiny_seed_runs():
    r = run_seed(0, "desk-experiment", {"meta.outer_steps": 1, "meta.tasks_per_step": 1, "eval.episodes_per_scene": 1, "env.max_steps": 3})
    for v in (r.adapt, r.no_adapt, r.baseline):
        assert 0.0 <= v <= 1.0
