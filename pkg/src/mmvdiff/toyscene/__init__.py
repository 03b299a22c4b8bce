"""Procedural multi-view driving scenes with analytic ground truth."""

from .camera import Camera, CameraRig, back_project, make_rig, project_point, project_points
from .io import SceneSample, make_scene, read_dataset, read_scene, write_dataset, write_scene
from .layout import LayoutMaps, make_layout_maps, occupancy_points
from .render import SEMANTIC_CLASSES, SEMANTIC_PALETTE, FrameBundle, render_frames
from .world import Cuboid, WorldSpec, empty_world, generate_world

__all__ = [
    "Camera", "CameraRig", "Cuboid", "FrameBundle", "LayoutMaps", "SEMANTIC_CLASSES",
    "SEMANTIC_PALETTE", "SceneSample", "WorldSpec", "back_project", "empty_world",
    "generate_world", "make_layout_maps", "make_rig", "make_scene", "occupancy_points",
    "project_point", "project_points", "read_dataset", "read_scene", "render_frames",
    "write_dataset", "write_scene",
]
