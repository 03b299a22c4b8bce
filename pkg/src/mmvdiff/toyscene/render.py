"""Flat-shaded z-buffer rasteriser producing RGB, depth and semantic frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, CameraRig
from .world import COLORS, GROUND_EXTENT, WorldSpec

SEMANTIC_CLASSES = ("sky", "ground", "road", "car", "truck")
SKY, GROUND, ROAD = 0, 1, 2
BOX_CLASS_OFFSET = 3
SEMANTIC_PALETTE = np.array([
    [0.0, 0.0, 1.0],  # sky
    [0.0, 1.0, 0.0],  # ground
    [1.0, 1.0, 0.0],  # road
    [1.0, 0.0, 0.0],  # car
    [1.0, 0.0, 1.0],  # truck
])

GROUND_RGB = np.array([0.36, 0.52, 0.30])
ROAD_RGB = np.array([0.30, 0.30, 0.32])
MARK_RGB = np.array([0.90, 0.90, 0.88])
SKY_TOP = np.array([0.45, 0.65, 0.95])
SKY_HORIZON = np.array([0.85, 0.90, 0.97])
FACE_SHADE = (0.85, 0.85, 0.7, 0.7, 1.0, 0.5)
NEAR = 0.05


@dataclass
class FrameBundle:
    rgb: np.ndarray  # [V, K, H, W, 3]
    depth: np.ndarray  # [V, K, H, W, 1], metric camera depth, 0 on sky
    semantic: np.ndarray  # [V, K, H, W, 1], ids into SEMANTIC_CLASSES


def _clip_near(poly: np.ndarray, near: float = NEAR) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon against ``Z >= near``."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            out.append(a)
        if ina != inb:
            s = (near - a[2]) / (b[2] - a[2])
            out.append(a + s * (b - a))
    return np.array(out)


def rasterize_face(cam_pts: np.ndarray, normal_cam: np.ndarray, camera: Camera,
                   rays: np.ndarray) -> tuple[tuple[slice, slice], np.ndarray, np.ndarray] | None:
    """Coverage and depth of one planar convex face.

    Returns the pixel window, a boolean coverage mask over it and the
    per-pixel depth (ray/plane intersection, exact for planar faces).
    """
    poly = _clip_near(cam_pts)
    if len(poly) < 3:
        return None
    u = camera.fx * poly[:, 0] / poly[:, 2] + camera.cx
    v = camera.fy * poly[:, 1] / poly[:, 2] + camera.cy
    j0 = max(int(np.floor(u.min() - 0.5)), 0)
    j1 = min(int(np.ceil(u.max() - 0.5)), camera.width - 1)
    i0 = max(int(np.floor(v.min() - 0.5)), 0)
    i1 = min(int(np.ceil(v.max() - 0.5)), camera.height - 1)
    if j1 < j0 or i1 < i0:
        return None
    window = (slice(i0, i1 + 1), slice(j0, j1 + 1))
    pu = np.arange(j0, j1 + 1) + 0.5
    pv = np.arange(i0, i1 + 1) + 0.5
    uu, vv = np.meshgrid(pu, pv)
    signs = []
    for a in range(len(poly)):
        b = (a + 1) % len(poly)
        signs.append((u[b] - u[a]) * (vv - v[a]) - (v[b] - v[a]) * (uu - u[a]))
    signs = np.stack(signs)
    inside = np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)
    d = rays[window]
    denom = d @ normal_cam
    offset = float(normal_cam @ cam_pts[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = offset / denom
    inside &= np.isfinite(depth) & (depth > 0)
    return window, inside, depth


def rasterize_boxes(world: WorldSpec, camera: Camera, k: int, rays: np.ndarray | None = None):
    """Z-buffer over cuboid faces only.

    Returns ``(zbuf, box_index, face_index)``; ``zbuf`` is ``inf`` and the
    indices ``-1`` where no box is hit.
    """
    h, w = camera.height, camera.width
    rays = camera.pixel_rays() if rays is None else rays
    zbuf = np.full((h, w), np.inf)
    box_idx = np.full((h, w), -1, dtype=np.int64)
    face_idx = np.full((h, w), -1, dtype=np.int64)
    for bi, box in enumerate(world.boxes):
        corners = camera.to_camera(box.corners_at(k))
        for fi, (ids, normal) in enumerate(box.faces()):
            n_cam = camera.rotation @ np.asarray(normal)
            pts = corners[list(ids)]
            if n_cam @ pts[0] >= 0:  # back face
                continue
            hit = rasterize_face(pts, n_cam, camera, rays)
            if hit is None:
                continue
            window, inside, depth = hit
            closer = inside & (depth < zbuf[window])
            zbuf[window] = np.where(closer, depth, zbuf[window])
            box_idx[window] = np.where(closer, bi, box_idx[window])
            face_idx[window] = np.where(closer, fi, face_idx[window])
    return zbuf, box_idx, face_idx


def _ground(world: WorldSpec, camera: Camera, rays: np.ndarray):
    dirs = rays @ camera.rotation  # world-frame directions with camera Z = 1
    origin = camera.center
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    hit = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    far = np.maximum(np.abs(hit[..., 0] - origin[0]), np.abs(hit[..., 1] - origin[1])) > GROUND_EXTENT
    t = np.where(far, np.inf, t)
    return t, hit, dirs


def _ground_colour(world: WorldSpec, hit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = hit[..., 0], hit[..., 1]
    on_road = np.abs(y) <= world.road_half_width
    cls = np.where(on_road, ROAD, GROUND)
    rgb = np.where(on_road[..., None], ROAD_RGB, GROUND_RGB)
    marks = np.zeros_like(on_road)
    for dy in world.dividers:
        marks |= (np.abs(y - dy) < 0.15) & (np.mod(x, 6.0) < 3.0)
    for edge in (-world.road_half_width + 0.2, world.road_half_width - 0.2):
        marks |= np.abs(y - edge) < 0.15
    if world.crossing_x is not None:
        marks |= on_road & (x >= world.crossing_x) & (x <= world.crossing_x + 3.0) & (np.mod(y, 1.0) < 0.5)
    rgb = np.where((marks & on_road)[..., None], MARK_RGB, rgb)
    return cls, rgb


def render_view(world: WorldSpec, camera: Camera, k: int):
    """RGB ``[H, W, 3]``, depth ``[H, W]`` and semantic ids ``[H, W]`` for one posed camera."""
    rays = camera.pixel_rays()
    t_ground, hit, dirs = _ground(world, camera, rays)
    zbuf, box_idx, face_idx = rasterize_boxes(world, camera, k, rays)

    elev = dirs[..., 2] / np.linalg.norm(dirs, axis=-1)
    mix = np.clip(elev, 0.0, 1.0)[..., None]
    rgb = (1 - mix) * SKY_HORIZON + mix * SKY_TOP
    depth = np.zeros(zbuf.shape)
    sem = np.full(zbuf.shape, SKY, dtype=np.int64)

    ground_vis = np.isfinite(t_ground) & (t_ground < zbuf)
    gcls, grgb = _ground_colour(world, hit)
    rgb = np.where(ground_vis[..., None], grgb, rgb)
    depth = np.where(ground_vis, t_ground, depth)
    sem = np.where(ground_vis, gcls, sem)

    box_vis = np.isfinite(zbuf) & ~ground_vis
    if world.boxes:
        base = np.array([COLORS[b.color] for b in world.boxes])
        cls = np.array([b.class_id + BOX_CLASS_OFFSET for b in world.boxes])
        shade = np.asarray(FACE_SHADE)[np.maximum(face_idx, 0)]
        box_rgb = base[np.maximum(box_idx, 0)] * shade[..., None]
        rgb = np.where(box_vis[..., None], box_rgb, rgb)
        depth = np.where(box_vis, zbuf, depth)
        sem = np.where(box_vis, cls[np.maximum(box_idx, 0)], sem)
    return rgb, depth, sem


def render_frames(world: WorldSpec, rig: CameraRig, frames: int) -> FrameBundle:
    v, h, w = rig.views, rig.height, rig.width
    rgb = np.zeros((v, frames, h, w, 3), dtype=np.float32)
    depth = np.zeros((v, frames, h, w, 1), dtype=np.float32)
    sem = np.zeros((v, frames, h, w, 1), dtype=np.float32)
    for k in range(frames):
        for vi, cam in enumerate(rig.posed(world.ego_position(k))):
            c, d, s = render_view(world, cam, k)
            rgb[vi, k] = c
            depth[vi, k, ..., 0] = d
            sem[vi, k, ..., 0] = s
    return FrameBundle(rgb, depth, sem)
