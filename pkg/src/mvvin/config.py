"""Run configuration: strict nested dataclasses backed by JSON.

Unknown keys are rejected, types are checked field by field, and
``to_dict(load(x)) == normalize(x)`` for every valid document.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from mvvin.errors import ConfigError

SCHEMA_VERSION = 1
CONFIG_DIR_ENV = "MVVIN_CONFIG_DIR"
PRESETS = ("desk-mini", "desk-experiment", "paper-shapes", "micro")


@dataclass
class ProcessorConfig:
    kind: str = "linear"
    layers: list[list[int]] = field(default_factory=list)


@dataclass
class EnvConfig:
    scene_pack: str = "bundled"
    room_types: list[str] = field(default_factory=lambda: ["kitchen", "living_room", "bedroom", "bathroom"])
    cell_size_m: float = 0.25
    success_radius_m: float = 1.0
    fov_deg: float = 90.0
    vfov_deg: float = 60.0
    camera_height_m: float = 0.5
    depth_shape: list[int] = field(default_factory=lambda: [24, 32])
    rgb_shape: list[int] = field(default_factory=lambda: [8, 7, 7])
    seg_dim: int = 24
    region_dim: int = 16
    max_regions: int = 7
    rgb_texture: float = 0.5
    encoder_seed: int = 0
    max_steps: int = 100


@dataclass
class ModalityConfig:
    enabled: list[str] = field(default_factory=lambda: ["rgb", "depth", "segmentation", "region_feature", "region_proposal"])
    grid: list[int] = field(default_factory=lambda: [7, 7])
    rgb: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("conv", [[8, 1, 1, 1, 1]]))
    depth: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("conv", [[8, 3, 3, 3, 4], [8, 2, 2, 1, 1]]))
    segmentation: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("linear", [[8]]))
    region_feature: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("linear", [[8]]))
    region_proposal: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("linear", [[10]]))
    target: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("linear", [[8]]))
    action: ProcessorConfig = field(default_factory=lambda: ProcessorConfig("linear", [[10]]))
    attention_hidden: int = 32
    aggregate_channels: int = 8


@dataclass
class ModelConfig:
    hidden_size: int = 64
    target_dim: int = 300
    embedding_seed: int = 0
    embedding_file: str = ""
    init_seed: int = 0
    head_gain: float = 0.1


@dataclass
class MetaConfig:
    k: int = 6
    psi: float = 1e-4
    gamma: float = 0.99
    beta: float = 0.01
    outer_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    reward_success: float = 5.0
    reward_step: float = -0.01
    phi_objective: str = "meta"
    phi_channels: list[int] = field(default_factory=lambda: [16, 16])
    phi_widths: list[int] = field(default_factory=lambda: [2, 2])
    readapt: bool = True
    adapt_in_training: bool = True
    fd_eps: float = 1e-5
    tasks_per_step: int = 4
    outer_steps: int = 100
    val_every: int = 0
    val_episodes_per_scene: int = 2
    checkpoint_every: int = 0
    workers: int = 1


@dataclass
class EvalConfig:
    split: str = "test"
    episodes_per_scene: int = 50
    adapt: bool = True
    mode: str = "argmax"
    spl_variant: str = "standard"
    long_threshold: int = 5
    workers: int = 1


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    modalities: ModalityConfig = field(default_factory=ModalityConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# ---------------------------------------------------------------- parsing


def _check(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(tp)
        return [_check(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path or '<root>'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name in names:
        if name in data:
            kwargs[name] = _check(hints[name], data[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    version = data.get("schema_version", SCHEMA_VERSION) if isinstance(data, dict) else None
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def normalize(data: dict) -> dict:
    return to_dict(from_dict(data))


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def validate(cfg: RunConfig) -> None:
    from mvvin.env.scene import ROOM_TYPES
    from mvvin.perception import ALWAYS_ON, VISUAL_MODALITIES

    e, m, meta, ev = cfg.env, cfg.modalities, cfg.meta, cfg.eval

    def need(cond, where, msg):
        if not cond:
            raise ConfigError(f"{where}: {msg}")

    need(e.cell_size_m > 0, "env.cell_size_m", "must be positive")
    need(e.success_radius_m > 0, "env.success_radius_m", "must be positive")
    need(0 < e.fov_deg < 180 and 0 < e.vfov_deg < 180, "env.fov_deg", "field of view must lie in (0, 180)")
    need(len(e.depth_shape) == 2 and min(e.depth_shape) >= 1, "env.depth_shape", "needs two positive ints")
    need(len(e.rgb_shape) == 3 and min(e.rgb_shape) >= 1, "env.rgb_shape", "needs three positive ints")
    need(e.seg_dim >= 1 and e.region_dim >= 1, "env.seg_dim", "feature dims must be >= 1")
    need(1 <= e.max_regions <= 7, "env.max_regions", "must lie in 1..7")
    need(e.max_steps >= 1, "env.max_steps", "must be >= 1")
    need(e.room_types and all(r in ROOM_TYPES for r in e.room_types), "env.room_types", f"must be a non-empty subset of {list(ROOM_TYPES)}")
    for mod in m.enabled:
        need(mod in VISUAL_MODALITIES, "modalities.enabled", f"unknown modality {mod!r}; choose from {list(VISUAL_MODALITIES)}")
    need(len(set(m.enabled)) == len(m.enabled), "modalities.enabled", "duplicate modality")
    need(len(m.grid) == 2 and min(m.grid) >= 1, "modalities.grid", "needs two positive ints")
    for name in VISUAL_MODALITIES + ALWAYS_ON:
        pc = getattr(m, name)
        want = "conv" if name in ("rgb", "depth") else "linear"
        need(pc.kind == want, f"modalities.{name}.kind", f"must be {want!r}")
        need(len(pc.layers) >= 1, f"modalities.{name}.layers", "needs at least one layer")
        width = 5 if want == "conv" else 1
        for i, layer in enumerate(pc.layers):
            need(len(layer) == width and min(layer) >= 1, f"modalities.{name}.layers[{i}]", f"needs {width} positive ints")
    need(m.attention_hidden >= 1 and m.aggregate_channels >= 1, "modalities.attention_hidden", "must be >= 1")
    need(cfg.model.hidden_size >= 1 and cfg.model.target_dim >= 1, "model.hidden_size", "must be >= 1")
    need(meta.k >= 1, "meta.k", "must be >= 1")
    need(meta.psi >= 0, "meta.psi", "must be >= 0")
    need(0 < meta.gamma <= 1, "meta.gamma", "must lie in (0, 1]")
    need(meta.beta >= 0 and meta.outer_lr >= 0, "meta.beta", "must be >= 0")
    need(0 <= meta.adam_beta1 < 1 and 0 <= meta.adam_beta2 < 1 and meta.adam_eps > 0, "meta.adam_beta1", "Adam constants out of range")
    need(meta.phi_objective in ("meta", "imitate"), "meta.phi_objective", "must be 'meta' or 'imitate'")
    need(len(meta.phi_channels) == 2 and len(meta.phi_widths) == 2, "meta.phi_channels", "two conv layers expected")
    need(min(meta.phi_channels) >= 1 and min(meta.phi_widths) >= 1, "meta.phi_widths", "must be >= 1")
    need(meta.fd_eps > 0, "meta.fd_eps", "must be positive")
    need(meta.tasks_per_step >= 1 and meta.outer_steps >= 0, "meta.tasks_per_step", "must be >= 1")
    need(meta.workers >= 1 and ev.workers >= 1, "meta.workers", "must be >= 1")
    need(ev.split in ("train", "val", "test"), "eval.split", "must be train, val or test")
    need(ev.episodes_per_scene >= 1, "eval.episodes_per_scene", "must be >= 1")
    need(ev.mode in ("argmax", "sample", "uniform"), "eval.mode", "must be argmax, sample or uniform")
    need(ev.spl_variant in ("standard", "paper_literal"), "eval.spl_variant", "must be standard or paper_literal")


# ---------------------------------------------------------------- loading


def preset_path(name: str) -> Path:
    return Path(str(resources.files("mvvin") / "presets" / f"{name}.json"))


def resolve_config_path(name_or_path: str) -> Path:
    """A file path, a name in ``$MVVIN_CONFIG_DIR``, or a bundled preset name."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    stem = name_or_path[:-5] if name_or_path.endswith(".json") else name_or_path
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir:
        cand = Path(env_dir) / f"{stem}.json"
        if cand.is_file():
            return cand
    cand = preset_path(Path(stem).name)
    if cand.is_file():
        return cand
    raise FileNotFoundError(f"config not found: {name_or_path}")


def load(name_or_path: str, overrides: dict[str, object] | None = None) -> RunConfig:
    path = resolve_config_path(name_or_path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return from_dict(apply_overrides(data, overrides or {}))


def apply_overrides(data: dict, overrides: dict[str, object]) -> dict:
    """Set dotted keys; string values are parsed as JSON when possible."""
    out = copy.deepcopy(data)
    for dotted, raw in overrides.items():
        value = raw
        if isinstance(raw, str):
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{dotted}: {part} is not an object")
        node[parts[-1]] = value
    return out


def shape_fingerprint(cfg: RunConfig) -> dict:
    """The part of the config that fixes parameter shapes."""
    e = cfg.env
    return {
        "env": {"rgb_shape": e.rgb_shape, "depth_shape": e.depth_shape, "seg_dim": e.seg_dim, "region_dim": e.region_dim},
        "modalities": dataclasses.asdict(cfg.modalities),
        "model": {"hidden_size": cfg.model.hidden_size, "target_dim": cfg.model.target_dim},
        "phi": {"channels": cfg.meta.phi_channels, "widths": cfg.meta.phi_widths},
    }


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(shape_fingerprint(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
