"""Raycasting renderer that synthesises the visual modalities directly.

A column of rays is cast per horizontal angle across the field of view; every
row of the depth image shares its column's wall/object hit and only decides
whether the floor is met first (rows below the horizon). Feature channels are
fixed pseudo-random functions of what each ray hits, keyed by an encoder
seed, so identical world states always produce identical observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from mvvin.env.scene import CELL_SIZE_M, CLASS_INDEX, CLASSES, AgentPose, GridScene


@dataclass(frozen=True)
class RenderSpec:
    depth_shape: tuple[int, int] = (24, 32)
    rgb_shape: tuple[int, int, int] = (8, 7, 7)
    seg_dim: int = 24
    region_dim: int = 16
    max_regions: int = 7
    fov_deg: float = 90.0
    vfov_deg: float = 60.0
    camera_height_m: float = 0.5
    rgb_texture: float = 0.5
    cell_size_m: float = CELL_SIZE_M


@dataclass(frozen=True)
class Region:
    label: str
    feature: np.ndarray
    box: np.ndarray  # (cx, cy, w, h) in [0, 1]
    confidence: float
    distance_m: float


@dataclass(frozen=True)
class Observation:
    rgb_feat: np.ndarray
    depth_map: np.ndarray
    seg_feat: np.ndarray
    regions: tuple[Region, ...]


def cast_ray(scene: GridScene, ox: float, oy: float, angle: float) -> tuple[float, int, int]:
    """Distance (cells) along ``angle`` from ``(ox, oy)`` to the first blocked cell."""
    dx, dy = math.cos(angle), math.sin(angle)
    cx, cy = int(math.floor(ox)), int(math.floor(oy))
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    inf = float("inf")
    if abs(dx) < 1e-15:
        t_max_x, t_dx = inf, inf
    else:
        t_max_x = ((cx + 1 - ox) if dx > 0 else (cx - ox)) / dx
        t_dx = 1.0 / abs(dx)
    if abs(dy) < 1e-15:
        t_max_y, t_dy = inf, inf
    else:
        t_max_y = ((cy + 1 - oy) if dy > 0 else (cy - oy)) / dy
        t_dy = 1.0 / abs(dy)
    blocked = scene.blocked
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            cx += step_x
            t_max_x += t_dx
        else:
            t = t_max_y
            cy += step_y
            t_max_y += t_dy
        if blocked[cy, cx]:
            return t, cx, cy


def column_angles(pose: AgentPose, width: int, fov_deg: float) -> np.ndarray:
    """World angles (radians) of the ray columns, left edge first."""
    offs = fov_deg / 2.0 - (np.arange(width) + 0.5) * fov_deg / width
    return np.radians(45.0 * pose.heading + offs)


def row_angles(pose: AgentPose, height: int, vfov_deg: float) -> np.ndarray:
    """Vertical angles (degrees, up positive) of the ray rows, top first."""
    return pose.pitch + vfov_deg / 2.0 - (np.arange(height) + 0.5) * vfov_deg / height


@dataclass(frozen=True)
class RayHits:
    depth: np.ndarray  # H x W metres
    cls: np.ndarray  # H x W class index
    cell: np.ndarray  # H x W x 2 hit cell (-1 for floor)


def cast_rays(scene: GridScene, pose: AgentPose, spec: RenderSpec) -> RayHits:
    hd, wd = spec.depth_shape
    ox, oy = pose.x + 0.5, pose.y + 0.5
    col_dist = np.empty(wd)
    col_cell = np.empty((wd, 2), dtype=np.int64)
    for j, a in enumerate(column_angles(pose, wd, spec.fov_deg)):
        t, cx, cy = cast_ray(scene, ox, oy, float(a))
        col_dist[j] = t * spec.cell_size_m
        col_cell[j] = (cx, cy)
    col_cls = scene.class_grid[col_cell[:, 1], col_cell[:, 0]]
    v = np.radians(row_angles(pose, hd, spec.vfov_deg))
    with np.errstate(divide="ignore"):
        floor = np.where(v < 0, spec.camera_height_m / np.tan(np.where(v < 0, -v, 1.0)), np.inf)
    hits_floor = floor[:, None] < col_dist[None, :]
    depth = np.where(hits_floor, floor[:, None], col_dist[None, :])
    cls = np.where(hits_floor, CLASS_INDEX["floor"], col_cls[None, :])
    cell = np.where(hits_floor[..., None], -1, np.broadcast_to(col_cell[None], (hd, wd, 2)))
    return RayHits(depth=depth, cls=cls, cell=cell)


@lru_cache(maxsize=64)
def _class_tables(encoder_seed: int, rgb_channels: int, region_dim: int):
    rng = np.random.default_rng([encoder_seed, 0xC1A55])
    rgb = rng.normal(size=(len(CLASSES), rgb_channels))
    reg = rng.normal(size=(len(CLASSES), region_dim)) / math.sqrt(region_dim)
    reg_dist = rng.normal(size=region_dim) / math.sqrt(region_dim)
    return rgb, reg, reg_dist


@lru_cache(maxsize=256)
def _texture(scene_id: str, width: int, height: int, encoder_seed: int, channels: int) -> np.ndarray:
    seed = [encoder_seed, 0x7E47, *scene_id.encode()]
    return np.random.default_rng(seed).normal(size=(height, width, channels))


def _bin_edges(n: int, bins: int) -> np.ndarray:
    return (np.arange(bins + 1) * n) // bins


def render_observation(scene: GridScene, pose: AgentPose, encoder_seed: int = 0, spec: RenderSpec = RenderSpec()) -> Observation:
    hits = cast_rays(scene, pose, spec)
    hd, wd = spec.depth_shape
    c, gh, gw = spec.rgb_shape
    n_cls = len(CLASSES)
    rgb_table, reg_table, reg_dist = _class_tables(encoder_seed, c, spec.region_dim)

    # segmentation: fraction of rays whose first hit is each class, folded into seg_dim slots
    counts = np.bincount(hits.cls.reshape(-1), minlength=n_cls).astype(float)
    seg = np.zeros(spec.seg_dim)
    np.add.at(seg, np.arange(n_cls) % spec.seg_dim, counts / (hd * wd))

    # rgb-like map: per bin, distance-attenuated class codes plus per-cell texture
    atten = 1.0 / (1.0 + hits.depth)
    row_e, col_e = _bin_edges(hd, gh), _bin_edges(wd, gw)
    row_bin = np.searchsorted(row_e, np.arange(hd), side="right") - 1
    col_bin = np.searchsorted(col_e, np.arange(wd), side="right") - 1
    bin_id = (row_bin[:, None] * gw + col_bin[None, :]).reshape(-1)
    n_bins = gh * gw
    bin_count = np.bincount(bin_id, minlength=n_bins).astype(float)
    w_cls = np.zeros((n_bins, n_cls))
    np.add.at(w_cls, (bin_id, hits.cls.reshape(-1)), atten.reshape(-1))
    feat = w_cls @ rgb_table
    if spec.rgb_texture:
        tex = _texture(scene.id, scene.width, scene.height, encoder_seed, c)
        cells = hits.cell.reshape(-1, 2)
        solid = cells[:, 0] >= 0
        flat_cell = cells[solid, 1] * scene.width + cells[solid, 0]
        w_cell = np.zeros((n_bins, scene.width * scene.height))
        np.add.at(w_cell, (bin_id[solid], flat_cell), atten.reshape(-1)[solid])
        feat = feat + spec.rgb_texture * (w_cell @ tex.reshape(-1, c))
    feat = feat / bin_count[:, None]
    rgb = feat.T.reshape(c, gh, gw)

    regions = _regions(scene, hits, spec, reg_table, reg_dist)
    return Observation(rgb_feat=rgb, depth_map=hits.depth, seg_feat=seg, regions=regions)


def _regions(scene, hits: RayHits, spec: RenderSpec, reg_table, reg_dist) -> tuple[Region, ...]:
    hd, wd = spec.depth_shape
    floor, wall = CLASS_INDEX["floor"], CLASS_INDEX["wall"]
    obj = (hits.cls != floor) & (hits.cls != wall)
    if not obj.any():
        return ()
    found: dict[tuple[int, int], list] = {}
    for col in np.nonzero(obj.any(axis=0))[0]:
        rows = np.nonzero(obj[:, col])[0]
        r0, r1 = int(rows[0]), int(rows[-1])
        key = (int(hits.cell[r0, col, 0]), int(hits.cell[r0, col, 1]))
        d = float(hits.depth[rows, col].min())
        entry = found.get(key)
        if entry is None:
            found[key] = [r0, r1, int(col), int(col), d, int(hits.cls[r0, col])]
        else:
            entry[0], entry[1] = min(entry[0], r0), max(entry[1], r1)
            entry[2], entry[3] = min(entry[2], int(col)), max(entry[3], int(col))
            entry[4] = min(entry[4], d)
    out = []
    for (r0, r1, c0, c1, d, k) in found.values():
        box = np.array([(c0 + c1 + 1) / (2 * wd), (r0 + r1 + 1) / (2 * hd), (c1 - c0 + 1) / wd, (r1 - r0 + 1) / hd])
        out.append(
            Region(
                label=CLASSES[k],
                feature=reg_table[k] + 0.1 * d * reg_dist,
                box=box,
                confidence=1.0 / (1.0 + d),
                distance_m=d,
            )
        )
    out.sort(key=lambda r: (-r.confidence, r.label, float(r.box[0])))
    return tuple(out[: spec.max_regions])
