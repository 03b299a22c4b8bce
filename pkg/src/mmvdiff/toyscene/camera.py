"""Pinhole cameras and the surround rig.

Camera frame: X right, Y down, Z forward. ``depth`` everywhere means the
camera-frame Z coordinate, not the Euclidean ray length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, maps the parent frame into the camera frame
    translation: np.ndarray  # 3
    width: int
    height: int

    @property
    def center(self) -> np.ndarray:
        """Camera origin in the parent frame."""
        return -self.rotation.T @ self.translation

    def extrinsic(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def to_camera(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def posed(self, ego_position: np.ndarray) -> "Camera":
        """Re-parent an ego-relative camera into the world at ``ego_position`` (no ego rotation)."""
        t = self.translation - self.rotation @ np.asarray(ego_position, dtype=np.float64)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.rotation, t, self.width, self.height)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions through pixel centres, scaled to Z = 1: ``[H, W, 3]``."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def params_vector(self) -> np.ndarray:
        """16 reals: intrinsics normalised by image size, then the 3x4 extrinsic."""
        intr = [self.fx / self.width, self.fy / self.height, self.cx / self.width, self.cy / self.height]
        return np.concatenate([intr, self.extrinsic().reshape(-1)])


def project_point(p_world, camera: Camera) -> tuple[float, float, float, bool]:
    """``(u, v, depth, in_front)`` for one point; behind-camera points are flagged."""
    x, y, z = camera.to_camera(np.asarray(p_world, dtype=np.float64))
    in_front = bool(z > 0)
    if not in_front:
        return float("nan"), float("nan"), float(z), False
    return float(camera.fx * x / z + camera.cx), float(camera.fy * y / z + camera.cy), float(z), True


def project_points(p_world: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection: ``u, v, depth`` arrays (u, v are NaN where depth <= 0)."""
    pc = camera.to_camera(p_world)
    z = pc[..., 2]
    safe = np.where(z > 0, z, np.nan)
    return camera.fx * pc[..., 0] / safe + camera.cx, camera.fy * pc[..., 1] / safe + camera.cy, z


def back_project(u, v, depth, camera: Camera) -> np.ndarray:
    """Pixel coordinates plus camera depth -> point in the camera's parent frame."""
    u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
    pc = np.stack([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth], -1)
    return (pc - camera.translation) @ camera.rotation


def yaw_rotation(yaw: float) -> np.ndarray:
    """Ego -> camera rotation for a level camera looking along ``yaw`` (left positive)."""
    c, s = np.cos(yaw), np.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.stack([right, down, forward])


def rig_yaws(views: int) -> list[float]:
    if views == 1:
        return [0.0]
    if views == 2:
        return [0.0, np.pi / 4]
    return [2 * np.pi * i / views for i in range(views)]


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple[Camera, ...]  # ego-relative

    @property
    def views(self) -> int:
        return len(self.cameras)

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    def posed(self, ego_position) -> list[Camera]:
        return [cam.posed(ego_position) for cam in self.cameras]

    def to_dict(self) -> dict:
        return {"cameras": [
            {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
             "rotation": c.rotation.tolist(), "translation": c.translation.tolist()}
            for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(tuple(
            Camera(c["fx"], c["fy"], c["cx"], c["cy"], np.asarray(c["rotation"]),
                   np.asarray(c["translation"]), c["width"], c["height"])
            for c in d["cameras"]))


def make_rig(views: int, width: int, height: int, fov_deg: float = 90.0,
             mount_height: float = 1.5) -> CameraRig:
    f = (width / 2) / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for yaw in rig_yaws(views):
        rot = yaw_rotation(yaw)
        center = np.array([0.0, 0.0, mount_height])
        cams.append(Camera(float(f), float(f), width / 2, height / 2, rot, -rot @ center, width, height))
    return CameraRig(tuple(cams))
