"""One test per acceptance criterion, each at its stated tolerance; a summary is printed at the end."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import pytest

from mvvin.cli import main
from mvvin.verify import (
    check_attention,
    check_bfs_dijkstra,
    check_gradients,
    check_meta_collapse,
    check_meta_sign,
    check_meta_toy,
    check_metric_cases,
    check_optimal_lower_bound,
    check_full_shapes,
)

pytestmark = pytest.mark.acceptance


def test_criterion_1_gradient_suite(record_criterion):
    t0 = time.perf_counter()
    ok, detail = check_gradients(instances=20)
    secs = time.perf_counter() - t0
    record_criterion("criterion 1 gradient suite", ok and secs < 60, f"{detail}; {secs:.1f}s (limit 60s)")
    assert ok and secs < 60


def test_criterion_2_full_shapes(record_criterion):
    ok, detail = check_full_shapes()
    record_criterion("criterion 2 full-size shapes", ok, detail)
    assert ok


def test_criterion_3_attention(record_criterion):
    ok, detail = check_attention(instances=100)
    record_criterion("criterion 3 attention properties", ok, detail)
    assert ok


def test_criterion_4_metrics_oracle(record_criterion):
    parts = [check_metric_cases(), check_optimal_lower_bound(1000), check_bfs_dijkstra(20, 5)]
    ok = all(p[0] for p in parts)
    record_criterion("criterion 4 metrics oracle", ok, " | ".join(p[1] for p in parts))
    assert ok


def test_criterion_5_meta_gradient_oracle(record_criterion):
    parts = [check_meta_toy(), check_meta_collapse(), check_meta_sign(trials=50, need=0.9)]
    ok = all(p[0] for p in parts)
    record_criterion("criterion 5 meta-gradient oracle", ok, " | ".join(p[1] for p in parts))
    assert ok


def test_criterion_6_learning_and_ablation(record_criterion):
    from mvvin.experiment import run_ablation

    res = run_ablation(range(5))
    print(res.table())
    in_budget = res.seconds <= 30 * 60
    ok_a = res.adaptation_wins >= 4
    ok_b = res.multimodal_wins >= 4
    detail = (f"adaptation better in {res.adaptation_wins}/5, rgb+segmentation better than rgb in "
              f"{res.multimodal_wins}/5, {res.seconds:.0f}s (limit 1800s); per seed (adapt/no-adapt/rgb): "
              + ", ".join(f"{r.adapt:.3f}/{r.no_adapt:.3f}/{r.baseline:.3f}" for r in res.seeds))
    record_criterion("criterion 6 learning smoke and ablation", ok_a and ok_b and in_budget, detail)
    assert in_budget, detail
    assert ok_a, detail
    assert ok_b, detail


def _run_dir(parent: Path, prefix: str) -> Path:
    (d,) = [p for p in parent.iterdir() if p.name.startswith(prefix)]
    return d


def _episodes_without_timing(path: Path) -> list[dict]:
    rows = list(csv.DictReader(open(path)))
    for r in rows:
        r.pop("inference_seconds")
        r.pop("cumulative_seconds")
    return rows


def _train_metrics_without_timing(path: Path) -> list[dict]:
    rows = list(csv.DictReader(open(path)))
    for r in rows:
        r.pop("wall_time")
    return rows


def _same_state(a: Path, b: Path) -> bool:
    from mvvin.checkpoint import load_checkpoint

    x, y = load_checkpoint(a), load_checkpoint(b)

    def adam_bytes(s):
        return s.step, [(k, s.m[k].tobytes(), s.v[k].tobytes()) for k in sorted(s.m)]

    return (x.theta.bit_equal(y.theta) and x.phi.bit_equal(y.phi) and x.outer_step == y.outer_step
            and adam_bytes(x.adam_theta) == adam_bytes(y.adam_theta) and adam_bytes(x.adam_phi) == adam_bytes(y.adam_phi))


def test_criterion_7_reproducibility(tmp_path, record_criterion):
    base = ["--config", "desk-mini", "--seed", "3", "--outer-steps", "3", "--meta.tasks_per_step", "4"]
    runs = []
    for name, workers in (("a", "2"), ("b", "2"), ("c", "1")):
        out = tmp_path / name
        assert main(["train", *base, "--workers", workers, "--out", str(out)]) == 0
        tr = _run_dir(out, "train-")
        ck = tr / "checkpoint.json"
        assert main(["eval", "--config", "desk-mini", "--seed", "3", "--checkpoint", str(ck), "--episodes-per-scene", "2",
                     "--workers", workers, "--out", str(out)]) == 0
        ev = _run_dir(out, "eval-")
        runs.append((ck, _train_metrics_without_timing(tr / "metrics.csv"),
                     (ev / "metrics.json").read_bytes(), _episodes_without_timing(ev / "episodes.csv")))
    # same command twice: byte-identical files; 1 vs 2 workers: the stored config differs in "workers",
    # so compare the learned state bit for bit instead
    same_ck = runs[0][0].read_bytes() == runs[1][0].read_bytes() and _same_state(runs[0][0], runs[2][0])
    same_train = runs[0][1] == runs[1][1] == runs[2][1]
    same_eval = runs[0][2] == runs[1][2] == runs[2][2] and runs[0][3] == runs[1][3] == runs[2][3]
    ok = same_ck and same_train and same_eval
    record_criterion("criterion 7 reproducibility", ok,
                     f"checkpoints identical: {same_ck}; training metrics identical: {same_train}; "
                     f"eval metrics identical: {same_eval} (two runs with 2 workers, one with 1)")
    assert ok


def test_criterion_8_timing_csv(tmp_path, record_criterion):
    out = tmp_path / "e"
    assert main(["eval", "--config", "desk-mini", "--checkpoint", "random-init", "--episodes-per-scene", "3", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(_run_dir(out, "eval-") / "episodes.csv")))
    cum = [float(r["cumulative_seconds"]) for r in rows]
    per = [float(r["inference_seconds"]) for r in rows]
    ok = len(rows) == 60 and all(a <= b for a, b in zip(cum, cum[1:])) and all(t >= 0 for t in per)
    record_criterion("criterion 8 timing instrumentation", ok, f"{len(rows)} episodes, cumulative column nondecreasing: {ok}")
    assert ok
