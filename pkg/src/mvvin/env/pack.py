"""Scene pack discovery: ``<root>/<split>/*.json``."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from mvvin.env.scene import GridScene, scene_load
from mvvin.errors import SplitOverlapError

SPLIT_NAMES = ("train", "val", "test")


def bundled_pack_root() -> Path:
    return Path(str(resources.files("mvvin") / "data" / "scenes"))


def resolve_pack(path: str | None) -> Path:
    if path in (None, "", "bundled"):
        return bundled_pack_root()
    return Path(path)


def load_split(root, split: str, room_types=None) -> list[GridScene]:
    root = Path(root)
    folder = root / split
    if not folder.is_dir():
        raise FileNotFoundError(f"scene pack split not found: {folder}")
    scenes = [scene_load(p, split=split) for p in sorted(folder.glob("*.json"))]
    if room_types:
        scenes = [s for s in scenes if s.room_type in room_types]
    return scenes


def check_disjoint(train: list[GridScene], other: list[GridScene]) -> None:
    overlap = {s.id for s in train} & {s.id for s in other}
    if overlap:
        raise SplitOverlapError(f"scenes appear in both splits: {sorted(overlap)}")
