"""Grid scenes, agent kinematics and the success test.

Coordinates: cell ``(x, y)`` is ``cells[y][x]``. Heading ``h`` points along
angle ``h * 45`` degrees measured from +x towards +y, so heading 0 moves
``(+1, 0)`` and heading 2 moves ``(0, +1)``. The agent stands at the centre
of its cell.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from mvvin.errors import SceneParseError, SceneValidationError

CELL_SIZE_M = 0.25
SUCCESS_RADIUS_CELLS = 4.0
HALF_FOV_DEG = 45.0
PITCHES = (-30, 0, 30)

FREE = "."
WALL = "#"

ROOM_TARGETS: dict[str, tuple[str, ...]] = {
    "kitchen": ("microwave", "toaster", "fridge", "bowl"),
    "living_room": ("television", "sofa", "laptop", "plant"),
    "bedroom": ("bed", "lamp", "book", "clock"),
    "bathroom": ("sink", "toilet", "towel", "soap"),
}
ROOM_TYPES = tuple(ROOM_TARGETS)
DISTRACTORS = ("table", "chair")

# index 0 and 1 are the non-object surfaces; objects follow in a fixed order
CLASSES: tuple[str, ...] = ("floor", "wall") + tuple(c for r in ROOM_TYPES for c in ROOM_TARGETS[r]) + DISTRACTORS
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}
OBJECT_CLASSES = CLASSES[2:]

# (dx, dy) per heading
DIRECTIONS = tuple((round(math.cos(math.radians(45 * h))), round(math.sin(math.radians(45 * h)))) for h in range(8))


class Action(enum.IntEnum):
    MoveAhead = 0
    RotateLeft = 1
    RotateRight = 2
    LookDown = 3
    LookUp = 4
    Done = 5


NUM_ACTIONS = len(Action)
NAV_ACTIONS = tuple(a for a in Action if a is not Action.Done)


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: int
    pitch: int = 0

    def key(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.heading, self.pitch)


@dataclass(frozen=True)
class Task:
    command: str
    start: AgentPose
    target: str


@dataclass(frozen=True, eq=False)
class GridScene:
    id: str
    room_type: str
    width: int
    height: int
    cells: tuple[tuple[str, ...], ...]
    targets: tuple[str, ...]
    split: str | None = field(default=None, compare=False)

    @cached_property
    def class_grid(self) -> np.ndarray:
        grid = np.zeros((self.height, self.width), dtype=np.int64)
        for y, row in enumerate(self.cells):
            for x, code in enumerate(row):
                grid[y, x] = CLASS_INDEX["floor"] if code == FREE else CLASS_INDEX["wall"] if code == WALL else CLASS_INDEX[code]
        return grid

    @cached_property
    def blocked(self) -> np.ndarray:
        return self.class_grid != CLASS_INDEX["floor"]

    @cached_property
    def free_cells(self) -> tuple[tuple[int, int], ...]:
        ys, xs = np.nonzero(~self.blocked)
        return tuple((int(x), int(y)) for y, x in zip(ys, xs))

    @cached_property
    def _cells_by_class(self) -> dict[int, tuple[tuple[int, int], ...]]:
        out: dict[int, list[tuple[int, int]]] = {}
        for y in range(self.height):
            for x in range(self.width):
                out.setdefault(int(self.class_grid[y, x]), []).append((x, y))
        return {k: tuple(v) for k, v in out.items()}

    def cells_of(self, cls: str) -> tuple[tuple[int, int], ...]:
        return self._cells_by_class.get(CLASS_INDEX[cls], ())

    @property
    def diagonal_m(self) -> float:
        return math.hypot(self.width, self.height) * CELL_SIZE_M

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and not self.blocked[y, x]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "room_type": self.room_type,
            "width": self.width,
            "height": self.height,
            "cells": [list(r) for r in self.cells],
            "targets": list(self.targets),
        }


def scene_from_dict(data: dict, split: str | None = None, source: str = "<dict>") -> GridScene:
    try:
        scene = GridScene(
            id=str(data["id"]),
            room_type=str(data["room_type"]),
            width=int(data["width"]),
            height=int(data["height"]),
            cells=tuple(tuple(str(c) for c in row) for row in data["cells"]),
            targets=tuple(str(t) for t in data["targets"]),
            split=split,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError(f"{source}: missing or malformed field ({exc})") from exc
    validate_scene(scene, source)
    return scene


def scene_load(path, split: str | None = None) -> GridScene:
    """Load and validate a JSON scene file."""
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if 0 < exc.lineno <= len(text.splitlines()) else ""
        raise SceneParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    if not isinstance(data, dict):
        raise SceneParseError(f"{path}: top level must be an object")
    return scene_from_dict(data, split=split, source=str(path))


def validate_scene(scene: GridScene, source: str = "<scene>") -> None:
    if scene.room_type not in ROOM_TARGETS:
        raise SceneValidationError(f"{source}: unknown room_type {scene.room_type!r}")
    if scene.width < 3 or scene.height < 3:
        raise SceneValidationError(f"{source}: scene must be at least 3x3")
    if len(scene.cells) != scene.height or any(len(r) != scene.width for r in scene.cells):
        raise SceneParseError(f"{source}: cells grid does not match {scene.width}x{scene.height}")
    for y, row in enumerate(scene.cells):
        for x, code in enumerate(row):
            if code not in (FREE, WALL) and code not in CLASS_INDEX:
                raise SceneParseError(f"{source}: row {y} col {x}: unknown cell code {code!r}")
            on_edge = x in (0, scene.width - 1) or y in (0, scene.height - 1)
            if on_edge and code != WALL:
                raise SceneValidationError(f"{source}: boundary cell ({x}, {y}) is {code!r}, expected wall")
    if not scene.targets:
        raise SceneValidationError(f"{source}: empty target vocabulary")
    allowed = ROOM_TARGETS[scene.room_type]
    for t in scene.targets:
        if t not in allowed:
            raise SceneValidationError(f"{source}: target {t!r} is not a {scene.room_type} class")
    free = scene.free_cells
    if not free:
        raise SceneValidationError(f"{source}: no free cells")
    reach = _flood(scene, free[0])
    if len(reach) != len(free):
        raise SceneValidationError(f"{source}: free space is not connected")
    for t in scene.targets:
        cells = scene.cells_of(t)
        if not cells:
            raise SceneValidationError(f"{source}: target {t!r} does not appear in the grid")
        if not any((x + dx, y + dy) in reach for x, y in cells for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))):
            raise SceneValidationError(f"{source}: target {t!r} is not reachable")


def _flood(scene: GridScene, start: tuple[int, int]) -> set[tuple[int, int]]:
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (x + dx, y + dy)
            if n not in seen and scene.is_free(*n):
                seen.add(n)
                queue.append(n)
    return seen


def step(scene: GridScene, pose: AgentPose, action: Action) -> tuple[AgentPose, bool, bool]:
    """Apply one action. Returns ``(new_pose, collided, done_signaled)``."""
    action = Action(action)
    if action is Action.MoveAhead:
        dx, dy = DIRECTIONS[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        blocked = not scene.is_free(nx, ny)
        if dx and dy:
            # no cutting corners past a blocked side cell
            blocked = blocked or not scene.is_free(pose.x + dx, pose.y) or not scene.is_free(pose.x, pose.y + dy)
        if blocked:
            return pose, True, False
        return AgentPose(nx, ny, pose.heading, pose.pitch), False, False
    if action is Action.RotateLeft:
        return AgentPose(pose.x, pose.y, (pose.heading + 1) % 8, pose.pitch), False, False
    if action is Action.RotateRight:
        return AgentPose(pose.x, pose.y, (pose.heading - 1) % 8, pose.pitch), False, False
    if action is Action.LookDown:
        return AgentPose(pose.x, pose.y, pose.heading, max(pose.pitch - 30, -30)), False, False
    if action is Action.LookUp:
        return AgentPose(pose.x, pose.y, pose.heading, min(pose.pitch + 30, 30)), False, False
    return pose, False, True


def segment_cells(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Cells crossed by the segment between two cell centres, in order.

    Where the segment passes exactly through a grid corner both side cells
    are included, so a corner touch counts as a crossing.
    """
    dx, dy = x1 - x0, y1 - y0
    nx, ny = abs(dx), abs(dy)
    sx, sy = (dx > 0) - (dx < 0), (dy > 0) - (dy < 0)
    x, y = x0, y0
    out = [(x, y)]
    ix = iy = 0
    while ix < nx or iy < ny:
        decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx
        if decision == 0:
            out.append((x + sx, y))
            out.append((x, y + sy))
            x, y = x + sx, y + sy
            ix, iy = ix + 1, iy + 1
        elif decision < 0:
            x, ix = x + sx, ix + 1
        else:
            y, iy = y + sy, iy + 1
        out.append((x, y))
    return out


def clear_line(scene: GridScene, x0: int, y0: int, x1: int, y1: int) -> bool:
    """True when no blocked cell lies strictly between the two endpoints."""
    for cx, cy in segment_cells(x0, y0, x1, y1):
        if (cx, cy) in ((x0, y0), (x1, y1)):
            continue
        if scene.blocked[cy, cx]:
            return False
    return True


def in_view(pose: AgentPose, cx: int, cy: int, radius: float = SUCCESS_RADIUS_CELLS) -> bool:
    dx, dy = cx - pose.x, cy - pose.y
    if dx == 0 and dy == 0:
        return False
    if math.hypot(dx, dy) > radius + 1e-9:
        return False
    diff = (math.degrees(math.atan2(dy, dx)) - 45.0 * pose.heading + 180.0) % 360.0 - 180.0
    return abs(diff) < HALF_FOV_DEG - 1e-9


def is_success(scene: GridScene, pose: AgentPose, target: str, radius: float = SUCCESS_RADIUS_CELLS) -> bool:
    """Target within ``radius`` cells, inside the horizontal FOV cone and unoccluded."""
    for cx, cy in scene.cells_of(target):
        if in_view(pose, cx, cy, radius) and clear_line(scene, pose.x, pose.y, cx, cy):
            return True
    return False


COMMAND_TEMPLATES = ("Please move to the {}", "Move to the {}", "Go to the {}")


def sample_task(scene: GridScene, rng_seed) -> Task:
    """Uniform free start cell and heading, level pitch, uniform target from the scene vocabulary."""
    rng = np.random.default_rng(rng_seed)
    free = scene.free_cells
    x, y = free[int(rng.integers(len(free)))]
    heading = int(rng.integers(8))
    target = scene.targets[int(rng.integers(len(scene.targets)))]
    command = COMMAND_TEMPLATES[int(rng.integers(len(COMMAND_TEMPLATES)))].format(target)
    return Task(command=command, start=AgentPose(x, y, heading, 0), target=target)


def scene_from_rows(rows, legend: dict[str, str], room_type: str = "kitchen", scene_id: str = "adhoc", targets=None) -> GridScene:
    """Build a scene from ASCII rows; ``legend`` maps single characters to object classes."""
    cells = [[legend.get(ch, ch) for ch in row] for row in rows]
    if targets is None:
        present = {c for row in cells for c in row}
        targets = [t for t in ROOM_TARGETS.get(room_type, ()) if t in present]
    data = {"id": scene_id, "room_type": room_type, "width": len(rows[0]), "height": len(rows), "cells": cells, "targets": list(targets)}
    return scene_from_dict(data)
