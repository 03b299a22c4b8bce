"""Layout condition maps: projected boxes, road polylines and sparse occupancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, CameraRig
from .render import NEAR, rasterize_boxes
from .world import GROUND_EXTENT, WorldSpec

BOX_COLORS = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # car, truck
ROAD_COLORS = {
    "boundary": np.array([0.0, 1.0, 0.0]),
    "divider": np.array([1.0, 1.0, 0.0]),
    "crossing": np.array([0.0, 1.0, 1.0]),
}
VOXEL = 0.5
STROKE_RADIUS = 1.0  # pixels; gives a 2-pixel wide line


@dataclass
class LayoutMaps:
    """Class-coloured renderings ``[V, K, H, W, 3]``; background is exactly 0."""

    box_map: np.ndarray
    road_map: np.ndarray
    occ_layout_map: np.ndarray

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.box_map, self.road_map, self.occ_layout_map

    @classmethod
    def zeros(cls, views: int, frames: int, height: int, width: int) -> "LayoutMaps":
        z = np.zeros((views, frames, height, width, 3), dtype=np.float32)
        return cls(z, z.copy(), z.copy())


def voxelize(world: WorldSpec, k: int, voxel: float = VOXEL) -> np.ndarray:
    """Voxel centres of every cuboid at frame ``k`` as ``[P, 4]`` rows ``(x, y, z, class_id)``."""
    rows = []
    for box in world.boxes:
        lo, hi = box.bounds_at(k)
        n = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 1)
        axes = [lo[a] + (np.arange(n[a]) + 0.5) * (hi[a] - lo[a]) / n[a] for a in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        rows.append(np.concatenate([g, np.full((len(g), 1), box.class_id)], 1))
    if not rows:
        return np.zeros((0, 4))
    return np.concatenate(rows)


def occupancy_points(world: WorldSpec, frames: int, voxel: float = VOXEL) -> np.ndarray:
    """Sparse occupancy over all frames: ``[P, 5]`` rows ``(frame, x, y, z, class_id)``."""
    parts = []
    for k in range(frames):
        vox = voxelize(world, k, voxel)
        parts.append(np.concatenate([np.full((len(vox), 1), k), vox], 1))
    return np.concatenate(parts) if parts else np.zeros((0, 5))


def box_map_view(world: WorldSpec, camera: Camera, k: int) -> np.ndarray:
    _, box_idx, _ = rasterize_boxes(world, camera, k)
    out = np.zeros((camera.height, camera.width, 3))
    if world.boxes:
        cls = np.array([b.class_id for b in world.boxes])
        hit = box_idx >= 0
        out[hit] = BOX_COLORS[cls[box_idx[hit]]]
    return out


def road_segments(world: WorldSpec) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """World-frame road polylines as ``(kind, start, end)`` segments on the ground."""
    ext = GROUND_EXTENT
    half = world.road_half_width
    if half <= 0:
        return []
    segs = [("boundary", np.array([-ext, y, 0.0]), np.array([ext, y, 0.0])) for y in (-half, half)]
    segs += [("divider", np.array([-ext, y, 0.0]), np.array([ext, y, 0.0])) for y in world.dividers]
    if world.crossing_x is not None:
        for x in (world.crossing_x, world.crossing_x + 3.0):
            segs.append(("crossing", np.array([x, -half, 0.0]), np.array([x, half, 0.0])))
    return segs


def _draw_segment(canvas: np.ndarray, a, b, colour, radius: float) -> None:
    h, w, _ = canvas.shape
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    p = np.stack([jj, ii], -1)
    ab = b - a
    denom = float(ab @ ab)
    s = np.clip(((p - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros((h, w))
    dist = np.linalg.norm(p - (a + s[..., None] * ab), axis=-1)
    canvas[dist <= radius] = colour


def road_map_view(world: WorldSpec, camera: Camera) -> np.ndarray:
    out = np.zeros((camera.height, camera.width, 3))
    for kind, p0, p1 in road_segments(world):
        a, b = camera.to_camera(p0), camera.to_camera(p1)
        if a[2] < NEAR and b[2] < NEAR:
            continue
        if a[2] < NEAR or b[2] < NEAR:  # clip to the near plane
            s = (NEAR - a[2]) / (b[2] - a[2])
            cut = a + s * (b - a)
            a, b = (cut, b) if a[2] < NEAR else (a, cut)
        uv = [np.array([camera.fx * q[0] / q[2] + camera.cx, camera.fy * q[1] / q[2] + camera.cy])
              for q in (a, b)]
        _draw_segment(out, uv[0], uv[1], ROAD_COLORS[kind], STROKE_RADIUS)
    return out


def occ_map_view(world: WorldSpec, camera: Camera, k: int, voxel: float = VOXEL) -> np.ndarray:
    """Splat voxel centres far-to-near so the nearest voxel's class wins."""
    out = np.zeros((camera.height, camera.width, 3))
    vox = voxelize(world, k, voxel)
    if not len(vox):
        return out
    pc = camera.to_camera(vox[:, :3])
    front = pc[:, 2] > NEAR
    pc, cls = pc[front], vox[front, 3].astype(int)
    u = np.floor(camera.fx * pc[:, 0] / pc[:, 2] + camera.cx).astype(int)
    v = np.floor(camera.fy * pc[:, 1] / pc[:, 2] + camera.cy).astype(int)
    ok = (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    order = np.argsort(-pc[ok, 2], kind="stable")
    out[v[ok][order], u[ok][order]] = BOX_COLORS[cls[ok][order]]
    return out


def make_layout_maps(world: WorldSpec, rig: CameraRig, frames: int) -> LayoutMaps:
    maps = LayoutMaps.zeros(rig.views, frames, rig.height, rig.width)
    for k in range(frames):
        for vi, cam in enumerate(rig.posed(world.ego_position(k))):
            maps.box_map[vi, k] = box_map_view(world, cam, k)
            maps.road_map[vi, k] = road_map_view(world, cam)
            maps.occ_layout_map[vi, k] = occ_map_view(world, cam, k)
    return maps
