"""Everything derived from a :class:`RunConfig` that rollouts need, bundled once."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mvvin.command import EmbeddingTable, parse_target
from mvvin.config import RunConfig
from mvvin.env.pack import check_disjoint, load_split, resolve_pack
from mvvin.env.render import RenderSpec
from mvvin.env.scene import OBJECT_CLASSES, GridScene
from mvvin.meta import PhiSpec, phi_spec_for
from mvvin.policy import NetworkSpec, RolloutSettings, network_spec_from_config


@dataclass(frozen=True)
class Runtime:
    spec: NetworkSpec
    phi_spec: PhiSpec
    render: RenderSpec
    settings: RolloutSettings
    table: EmbeddingTable
    psi: float
    gamma: float
    beta: float
    fd_eps: float
    phi_objective: str

    def target_vector(self, command: str, scene: GridScene) -> np.ndarray:
        return self.table.vector(parse_target(command, scene.targets))

    def with_settings(self, **changes) -> "Runtime":
        from dataclasses import replace

        return replace(self, settings=replace(self.settings, **changes))


def build_runtime(cfg: RunConfig, mode: str = "argmax") -> Runtime:
    e, meta = cfg.env, cfg.meta
    spec = network_spec_from_config(cfg)
    render = RenderSpec(
        depth_shape=tuple(e.depth_shape),
        rgb_shape=tuple(e.rgb_shape),
        seg_dim=e.seg_dim,
        region_dim=e.region_dim,
        max_regions=e.max_regions,
        fov_deg=e.fov_deg,
        vfov_deg=e.vfov_deg,
        camera_height_m=e.camera_height_m,
        rgb_texture=e.rgb_texture,
        cell_size_m=e.cell_size_m,
    )
    settings = RolloutSettings(
        max_steps=e.max_steps,
        mode=mode,
        k=meta.k,
        readapt=meta.readapt,
        reward_step=meta.reward_step,
        reward_success=meta.reward_success,
        success_radius_cells=e.success_radius_m / e.cell_size_m,
        encoder_seed=e.encoder_seed,
    )
    if cfg.model.embedding_file:
        table = EmbeddingTable.from_file(cfg.model.embedding_file, OBJECT_CLASSES)
    else:
        table = EmbeddingTable.seeded(OBJECT_CLASSES, cfg.model.target_dim, cfg.model.embedding_seed)
    return Runtime(
        spec=spec,
        phi_spec=phi_spec_for(spec, meta.phi_channels, meta.phi_widths),
        render=render,
        settings=settings,
        table=table,
        psi=meta.psi,
        gamma=meta.gamma,
        beta=meta.beta,
        fd_eps=meta.fd_eps,
        phi_objective=meta.phi_objective,
    )


def load_scenes(cfg: RunConfig, split: str) -> list[GridScene]:
    return load_split(resolve_pack(cfg.env.scene_pack), split, cfg.env.room_types)


def load_disjoint(cfg: RunConfig, train_split: str, other_split: str):
    train = load_scenes(cfg, train_split)
    other = load_scenes(cfg, other_split)
    check_disjoint(train, other)
    return train, other
