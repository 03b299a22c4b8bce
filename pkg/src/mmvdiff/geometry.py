"""3D query points for the hash-grid spatial embedding of latent cells.

Every latent cell ``(v, k, i, j)`` gets the world points that fall inside its
pixel footprint: the cell centre back-projected at a few nominal depths and,
when available, occupancy voxel centres that project into it. Features of a
cell's points are averaged, so each query row belongs to exactly one cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toyscene.camera import CameraRig, back_project, project_points

NOMINAL_DEPTHS = (4.0, 8.0, 16.0, 32.0)
WORLD_LO = np.array([-40.0, -40.0, -8.0])
WORLD_HI = np.array([40.0, 40.0, 8.0])


def normalize_points(p: np.ndarray) -> np.ndarray:
    """World metres -> the unit cube used by the hash grid (clamped)."""
    return np.clip((np.asarray(p, dtype=np.float64) - WORLD_LO) / (WORLD_HI - WORLD_LO), 0.0, 1.0)


@dataclass
class SpatialQueries:
    points: np.ndarray  # [Q, 3] in [0, 1]^3
    cell_ids: np.ndarray  # [Q], flat index over (V, K, H', W')
    num_cells: int

    @property
    def weights(self) -> np.ndarray:
        """Per-row ``1 / count(cell)`` so a segment sum becomes a mean."""
        counts = np.bincount(self.cell_ids, minlength=self.num_cells)
        return 1.0 / counts[self.cell_ids]


@dataclass
class SceneGeometry:
    """Cameras plus the ego pose per frame: everything needed to place latent cells in 3D."""

    rig: CameraRig
    ego_positions: np.ndarray  # [K, 3]

    def nominal_queries(self, latent_hw: tuple[int, int],
                        depths=NOMINAL_DEPTHS) -> tuple[np.ndarray, np.ndarray]:
        hh, ww = latent_hw
        sy, sx = self.rig.height / hh, self.rig.width / ww
        jj, ii = np.meshgrid((np.arange(ww) + 0.5) * sx, (np.arange(hh) + 0.5) * sy)
        pts, ids = [], []
        frames = len(self.ego_positions)
        for k, ego in enumerate(self.ego_positions):
            for v, cam in enumerate(self.rig.posed(ego)):
                base = (v * frames + k) * hh * ww
                cell = base + np.arange(hh * ww)
                for d in depths:
                    p = back_project(jj.ravel(), ii.ravel(), np.full(hh * ww, d), cam)
                    pts.append(p)
                    ids.append(cell)
        return np.concatenate(pts), np.concatenate(ids)

    def occupancy_queries(self, occupancy: np.ndarray,
                          latent_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        hh, ww = latent_hw
        sy, sx = self.rig.height / hh, self.rig.width / ww
        pts, ids = [np.zeros((0, 3))], [np.zeros(0, dtype=np.int64)]
        frames = len(self.ego_positions)
        occupancy = np.asarray(occupancy, dtype=np.float64)
        for k, ego in enumerate(self.ego_positions):
            vox = occupancy[occupancy[:, 0] == k, 1:4]
            if not len(vox):
                continue
            for v, cam in enumerate(self.rig.posed(ego)):
                u, vv, z = project_points(vox, cam)
                ok = (z > 0) & (u >= 0) & (u < cam.width) & (vv >= 0) & (vv < cam.height)
                if not ok.any():
                    continue
                ci = np.floor(vv[ok] / sy).astype(np.int64)
                cj = np.floor(u[ok] / sx).astype(np.int64)
                pts.append(vox[ok])
                ids.append((v * frames + k) * hh * ww + ci * ww + cj)
        return np.concatenate(pts), np.concatenate(ids)

    def queries(self, latent_hw: tuple[int, int], occupancy: np.ndarray | None = None) -> SpatialQueries:
        pts, ids = self.nominal_queries(latent_hw)
        if occupancy is not None and len(occupancy):
            opts, oids = self.occupancy_queries(occupancy, latent_hw)
            pts, ids = np.concatenate([pts, opts]), np.concatenate([ids, oids])
        cells = self.rig.views * len(self.ego_positions) * latent_hw[0] * latent_hw[1]
        return SpatialQueries(normalize_points(pts), ids.astype(np.int64), cells)
