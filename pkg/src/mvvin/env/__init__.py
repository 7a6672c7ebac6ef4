from mvvin.env.pack import bundled_pack_root, check_disjoint, load_split, resolve_pack
from mvvin.env.render import Observation, Region, RenderSpec, cast_ray, cast_rays, render_observation
from mvvin.env.scene import (
    CELL_SIZE_M,
    CLASSES,
    COMMAND_TEMPLATES,
    NAV_ACTIONS,
    NUM_ACTIONS,
    OBJECT_CLASSES,
    ROOM_TARGETS,
    ROOM_TYPES,
    SUCCESS_RADIUS_CELLS,
    Action,
    AgentPose,
    GridScene,
    Task,
    clear_line,
    is_success,
    sample_task,
    scene_from_dict,
    scene_from_rows,
    scene_load,
    segment_cells,
    step,
    validate_scene,
)
