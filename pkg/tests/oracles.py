"""Independent geometric oracles for the toy-scene ground truth.

Nothing here calls the rasteriser: depths come from ray/AABB slab tests and
corner visibility from the pinhole projection alone.
"""

import numpy as np

from mmvdiff.toyscene import back_project, project_point
from mmvdiff.toyscene.render import BOX_CLASS_OFFSET


def slab_depth(origin, dirs, lo, hi):
    """Ray/AABB entry parameter for rays ``origin + t * dirs`` (inf on a miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / dirs
        t1 = (hi - origin) / dirs
    near = np.nanmax(np.minimum(t0, t1), axis=-1)
    far = np.nanmin(np.maximum(t0, t1), axis=-1)
    return np.where((far >= near) & (near > 0), near, np.inf)


def world_rays(cam):
    # camera-frame rays have Z = 1, so the ray parameter is the camera depth
    return cam.pixel_rays() @ cam.rotation


def ray_box_check(world, rig, frames):
    """``(max depth error, pixel count, class mismatches)`` over every box-labelled pixel."""
    worst, count, mismatched = 0.0, 0, 0
    for k in range(frames.depth.shape[1]):
        for vi, cam in enumerate(rig.posed(world.ego_position(k))):
            sem = frames.semantic[vi, k, ..., 0]
            mask = sem >= BOX_CLASS_OFFSET
            if not mask.any():
                continue
            dirs = world_rays(cam)[mask]
            hits = np.stack([slab_depth(cam.center, dirs, *b.bounds_at(k)) for b in world.boxes])
            got = frames.depth[vi, k, ..., 0][mask]
            worst = max(worst, float(np.abs(got - hits.min(axis=0)).max()))
            owner = np.array([b.class_id for b in world.boxes])[hits.argmin(axis=0)]
            mismatched += int(np.sum(sem[mask] != owner + BOX_CLASS_OFFSET))
            count += int(mask.sum())
    return worst, count, mismatched


def cross_view_check(world, rig, frames, occlusion_tol=0.05):
    """``(max disagreement, corner count)`` for box corners seen unoccluded in two or more views.

    A view counts when its rendered depth at the corner's pixel matches the
    corner depth (otherwise the corner is occluded there). Each such view
    back-projects the corner from its projection; the recoveries must agree
    with each other and with the true corner.
    """
    worst, count = 0.0, 0
    for k in range(frames.depth.shape[1]):
        cams = rig.posed(world.ego_position(k))
        for box in world.boxes:
            for corner in box.corners_at(k):
                recovered = []
                for vi, cam in enumerate(cams):
                    u, v, z, front = project_point(corner, cam)
                    if not front or not (0 <= u < cam.width and 0 <= v < cam.height):
                        continue
                    rendered = frames.depth[vi, k, int(v), int(u), 0]
                    if abs(rendered - z) > occlusion_tol * z:
                        continue
                    recovered.append(back_project(u, v, z, cam))
                if len(recovered) >= 2:
                    pts = np.stack(recovered)
                    worst = max(worst, float(np.abs(pts - pts[0]).max()), float(np.abs(pts - corner).max()))
                    count += 1
    return worst, count
