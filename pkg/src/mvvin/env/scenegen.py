"""Deterministic generator for the bundled scene pack.

Run ``python -m mvvin.env.scenegen <out_dir>`` to rebuild the pack; the
output is a pure function of the constants below.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from mvvin.env.scene import DISTRACTORS, FREE, ROOM_TARGETS, ROOM_TYPES, WALL, scene_from_dict
from mvvin.errors import SceneValidationError

SPLITS = {"train": 20, "val": 5, "test": 5}
SIZES = (8, 9, 10)


def generate_scene(room_type: str, split: str, index: int, size: tuple[int, int] | None = None) -> dict:
    seed = [ROOM_TYPES.index(room_type), list(SPLITS).index(split), index, 0x5CE7E]
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        w, h = size or (int(rng.choice(SIZES)), int(rng.choice(SIZES)))
        grid = [[WALL if x in (0, w - 1) or y in (0, h - 1) else FREE for x in range(w)] for y in range(h)]
        interior = [(x, y) for y in range(1, h - 1) for x in range(1, w - 1)]
        n_blocks = int(rng.integers(0, 3))
        n_distract = int(rng.integers(1, 3))
        items = list(ROOM_TARGETS[room_type]) + [str(rng.choice(DISTRACTORS)) for _ in range(n_distract)]
        items += [WALL] * n_blocks
        picks = rng.choice(len(interior), size=len(items), replace=False)
        for item, p in zip(items, picks):
            x, y = interior[int(p)]
            grid[y][x] = item
        data = {
            "id": f"{room_type}_{split}_{index:02d}",
            "room_type": room_type,
            "width": w,
            "height": h,
            "cells": grid,
            "targets": list(ROOM_TARGETS[room_type]),
        }
        try:
            scene_from_dict(data)
        except SceneValidationError:
            continue
        return data
    raise RuntimeError(f"could not generate a valid {room_type} scene")


def generate_pack(out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for split, count in SPLITS.items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for room_type in ROOM_TYPES:
            for i in range(count):
                size = (10, 10) if (split, room_type, i) == ("train", "kitchen", 0) else None
                data = generate_scene(room_type, split, i, size)
                path = out_dir / split / f"{data['id']}.json"
                path.write_text(_dump(data))
                written.append(path)
    return written


def _dump(data: dict) -> str:
    rows = ",\n".join("    " + json.dumps(r) for r in data["cells"])
    head = {k: v for k, v in data.items() if k != "cells"}
    body = json.dumps(head, indent=2)[:-2]
    return body + ',\n  "cells": [\n' + rows + "\n  ]\n}\n"


if __name__ == "__main__":
    paths = generate_pack(sys.argv[1] if len(sys.argv) > 1 else "scenes")
    print(f"wrote {len(paths)} scenes")
