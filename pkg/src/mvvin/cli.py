"""``mvvin`` command line: train, eval, rollout, verify.

Exit codes:
  0  success
  1  unexpected error
  2  invalid configuration or arguments
  3  missing or unreadable input (scene pack, config file, output directory)
  4  a verification check failed
  5  checkpoint unreadable or incompatible with the config
  6  command text names no known target
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import platform
import subprocess
import sys
from pathlib import Path

import numpy as np

from mvvin import __version__
from mvvin import config as config_mod
from mvvin.errors import (
    CheckpointError,
    ConfigError,
    MvvinError,
    NoTargetError,
    SceneParseError,
    SceneValidationError,
    SplitOverlapError,
    UnknownWordError,
)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4
EXIT_CHECKPOINT = 5
EXIT_COMMAND = 6

RANDOM_INIT = "random-init"


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------- argument plumbing


def _split_overrides(extra: list[str]) -> dict[str, str]:
    """``--a.b value`` / ``--a.b=value`` pairs left over by argparse."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {tok!r} (config overrides look like --meta.psi 0.01)")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _shortcut_overrides(args) -> dict[str, object]:
    out: dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "outer_steps", None) is not None:
        out["meta.outer_steps"] = args.outer_steps
    if getattr(args, "modalities", None):
        out["modalities.enabled"] = [m.strip() for m in args.modalities.split(",") if m.strip()]
    if getattr(args, "workers", None) is not None:
        out["meta.workers"] = args.workers
        out["eval.workers"] = args.workers
    if getattr(args, "episodes_per_scene", None) is not None:
        out["eval.episodes_per_scene"] = args.episodes_per_scene
    if getattr(args, "split", None):
        out["eval.split"] = args.split
    if getattr(args, "no_adapt", False):
        out["eval.adapt"] = False
    return out


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvvin", description="Meta-learned multimodal navigation at desk scale.")
    p.add_argument("--version", action="version", version=f"mvvin {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="preset name, path, or name in $MVVIN_CONFIG_DIR")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--modalities", help="comma-separated visual modalities, e.g. rgb,segmentation")
        sp.add_argument("--workers", type=int)
        if out:
            sp.add_argument("--out", default="runs", help="parent directory for the timestamped run directory")

    t = sub.add_parser("train", help="meta-train theta and phi")
    common(t)
    t.add_argument("--outer-steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a held-out split")
    common(e)
    e.add_argument("--checkpoint", required=True, help=f"checkpoint path or '{RANDOM_INIT}'")
    e.add_argument("--split", choices=("val", "test"))
    e.add_argument("--episodes-per-scene", type=int)
    e.add_argument("--no-adapt", action="store_true", help="disable test-time self-supervised adaptation")

    r = sub.add_parser("rollout", help="run one episode and write a JSONL trace")
    common(r, out=False)
    r.add_argument("--checkpoint", required=True, help=f"checkpoint path or '{RANDOM_INIT}'")
    r.add_argument("--scene", required=True, help="scene id from the pack, or a scene JSON path")
    r.add_argument("--command", required=True, help='e.g. "Move to the sink"')
    r.add_argument("--trace", required=True, help="output JSONL path")
    r.add_argument("--split", choices=("train", "val", "test"))
    r.add_argument("--no-adapt", action="store_true")
    r.add_argument("--mode", choices=("argmax", "sample"), default="argmax")

    v = sub.add_parser("verify", help="run the oracle checks and print a pass/fail table")
    g = v.add_mutually_exclusive_group()
    g.add_argument("--quick", action="store_true", help="fewer instances per check")
    g.add_argument("--full", action="store_true", help="full trial counts (slower)")
    return p


# ---------------------------------------------------------------- run directories


def unique_run_dir(base: Path, stem: str) -> Path:
    """``base/stem`` or ``base/stem-N``; never reuses an existing directory."""
    base.mkdir(parents=True, exist_ok=True)
    path, n = base / stem, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1
            path = base / f"{stem}-{n}"


def _git_rev() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _write_run_files(run_dir: Path, cfg, argv: list[str], extra: dict | None = None) -> None:
    (run_dir / "config.json").write_text(config_mod.dumps(cfg))
    info = {
        "argv": argv,
        "seed": cfg.seed,
        "config_hash": config_mod.config_hash(cfg),
        "code_version": __version__,
        "git_rev": _git_rev(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": _dt.datetime.now().isoformat(timespec="seconds"),
        **(extra or {}),
    }
    (run_dir / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _new_run_dir(args, cmd: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return unique_run_dir(Path(args.out), f"{cmd}-{stamp}")


# ---------------------------------------------------------------- model loading


def _load_model(args, overrides: dict):
    """(cfg, theta, phi, outer_step) from a checkpoint or a fresh initialisation."""
    from mvvin.checkpoint import check_compatible, load_checkpoint
    from mvvin.runtime import build_runtime
    from mvvin.train import initial_state

    if args.checkpoint == RANDOM_INIT:
        cfg = config_mod.load(args.config or "desk-mini", overrides)
        config_mod.validate(cfg)
        rt = build_runtime(cfg)
        state = initial_state(rt, cfg.model.init_seed)
        return cfg, rt, state.theta, state.phi, 0
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = config_mod.load(args.config, overrides)
    else:
        cfg = config_mod.from_dict(config_mod.apply_overrides(ckpt.config, overrides))
    config_mod.validate(cfg)
    rt = build_runtime(cfg)
    check_compatible(ckpt.theta, rt.spec.param_shapes(), "theta")
    check_compatible(ckpt.phi, rt.phi_spec.param_shapes(), "phi")
    return cfg, rt, ckpt.theta, ckpt.phi, ckpt.outer_step


# ---------------------------------------------------------------- commands


def cmd_train(args, overrides, argv) -> int:
    from mvvin.checkpoint import check_compatible, load_checkpoint
    from mvvin.runtime import build_runtime, load_disjoint
    from mvvin.train import TrainState, train_loop

    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        base = config_mod.load(args.config, {}) if args.config else config_mod.from_dict(ckpt.config)
        cfg = config_mod.from_dict(config_mod.apply_overrides(config_mod.to_dict(base), overrides))
    else:
        cfg = config_mod.load(args.config or "desk-mini", overrides)
    config_mod.validate(cfg)
    rt = build_runtime(cfg, mode="sample")
    if args.resume:
        check_compatible(ckpt.theta, rt.spec.param_shapes(), "theta")
        check_compatible(ckpt.phi, rt.phi_spec.param_shapes(), "phi")
        state = TrainState(ckpt.theta, ckpt.phi, ckpt.adam_theta, ckpt.adam_phi, ckpt.outer_step)
    train_scenes, val_scenes = load_disjoint(cfg, "train", "val")
    if not cfg.meta.val_every:
        val_scenes = []
    run_dir = _new_run_dir(args, "train")
    _write_run_files(run_dir, cfg, argv, {"resumed_from": args.resume})
    print(f"run directory: {run_dir}")
    state = train_loop(cfg, rt, train_scenes, val_scenes, run_dir, state, log=print)
    print(f"finished at outer step {state.outer_step}; checkpoint {run_dir / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args, overrides, argv) -> int:
    from mvvin.evaluation import emit_metrics, format_table, run_evaluation
    from mvvin.runtime import load_disjoint

    cfg, rt, theta, phi, step = _load_model(args, overrides)
    ev = cfg.eval
    train_scenes, scenes = load_disjoint(cfg, "train", ev.split)
    report, records = run_evaluation(
        theta, phi, scenes, rt, ev.episodes_per_scene, adapt=ev.adapt, seed=cfg.seed, mode=ev.mode,
        long_threshold=ev.long_threshold, workers=ev.workers,
    )
    run_dir = _new_run_dir(args, "eval")
    _write_run_files(run_dir, cfg, argv, {"checkpoint": args.checkpoint, "outer_step": step})
    emit_metrics(report, records, run_dir / "episodes.csv")
    (run_dir / "metrics.json").write_text(json.dumps(report.to_dict(timing=False), indent=2, sort_keys=True) + "\n")
    (run_dir / "timing.json").write_text(json.dumps({"total_inference_seconds": report.total_inference_seconds, "mean_inference_seconds": report.mean_inference_seconds}, indent=2, sort_keys=True) + "\n")
    print(f"split {ev.split}: {len(scenes)} scenes x {ev.episodes_per_scene} episodes, adaptation {'on' if ev.adapt else 'off'}, SPL {ev.spl_variant}")
    print(format_table(report))
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _find_scene(cfg, scene_arg: str, split: str | None):
    from mvvin.env.scene import scene_load
    from mvvin.runtime import load_scenes

    p = Path(scene_arg)
    if p.suffix == ".json" and p.is_file():
        return scene_load(p)
    for sp in ([split] if split else ["test", "val", "train"]):
        for s in load_scenes(cfg, sp):
            if s.id == scene_arg:
                return s
    raise FileNotFoundError(f"scene {scene_arg!r} not found in the scene pack")


def cmd_rollout(args, overrides, argv) -> int:
    from mvvin.autodiff import no_grad
    from mvvin.command import parse_target
    from mvvin.env.scene import Task, sample_task
    from mvvin.evaluation import episode_seeds
    from mvvin.meta import inner_adapt
    from mvvin.policy import rollout, write_trace

    cfg, rt, theta, phi, step = _load_model(args, overrides)
    scene = _find_scene(cfg, args.scene, args.split)
    target = parse_target(args.command, scene.targets)
    _, ss = episode_seeds(cfg.seed, 0, 0)
    task_ss, policy_ss = ss.spawn(2)
    task = Task(args.command, sample_task(scene, task_ss).start, target)
    adapter = None
    if not args.no_adapt:
        def adapter(win, cur):
            return inner_adapt(cur, win, phi, rt.psi, rt.spec)

    with no_grad():
        traj = rollout(
            scene, task, theta, rt.spec, rt.table.vector(target), rt.with_settings(mode=args.mode).settings, rt.render,
            rng=np.random.default_rng(policy_ss), adapter=adapter,
        )
    Path(args.trace).parent.mkdir(parents=True, exist_ok=True)
    write_trace(traj, args.trace, {"checkpoint": args.checkpoint, "outer_step": step, "seed": cfg.seed, "adapt": not args.no_adapt})
    print(f"{scene.id}: target {target}, {len(traj.steps)} steps, success {traj.success}; trace {args.trace}")
    return EXIT_OK


def cmd_verify(args, overrides, argv) -> int:
    from mvvin.verify import format_checks, run_all

    if overrides:
        raise UsageError("verify takes no config overrides")
    checks = run_all(quick=args.quick, full=args.full)
    print(format_checks(checks))
    failed = [c.name for c in checks if not c.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = {**_split_overrides(extra), **_shortcut_overrides(args)}
        return COMMANDS[args.cmd](args, overrides, argv)
    except (NoTargetError, UnknownWordError) as exc:
        print(f"command error: {exc}", file=sys.stderr)
        return EXIT_COMMAND
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FileNotFoundError, PermissionError, IsADirectoryError, SceneParseError, SceneValidationError, SplitOverlapError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MvvinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
