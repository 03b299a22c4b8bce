"""Scoring generated scenes against their analytic ground truth."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .metrics import EvalReport, absrel, fd_features, miou, rgb_mse, toy_fd
from .pipeline import DiffusionModel, PreparedScene, config_hash
from .toyscene.render import SEMANTIC_CLASSES


def score_modalities(decoded: dict[str, np.ndarray], scene: PreparedScene) -> dict[str, dict[str, float]]:
    """Per-modality metrics of one decoded sample; only generated modalities are scored."""
    frames = scene.sample.frames
    out: dict[str, dict[str, float]] = {}
    if "rgb" in decoded:
        out["rgb"] = {"rgb_mse": rgb_mse(decoded["rgb"], frames.rgb)}
    if "depth" in decoded:
        out["depth"] = {"absrel": absrel(decoded["depth"], frames.depth, frames.depth > 0)}
    if "semantic" in decoded:
        out["semantic"] = {"miou": miou(decoded["semantic"], frames.semantic, range(len(SEMANTIC_CLASSES)))}
    return out


def evaluate(model: DiffusionModel, scenes: Sequence[PreparedScene], steps: int = 50,
             guidance: float = 1.0, seed: int = 0, use_text: bool = True, use_layout: bool = True,
             use_ref: bool = False, clip_x0: bool = True) -> EvalReport:
    """Sample every scene, average the per-scene metrics and add toy-FD per modality.

    Toy-FD compares per-frame pooled features of all generated frames with
    those of the ground truth; for depth and semantics the codec-space
    images are compared so every modality is on a [0, 1] scale.
    """
    from .pipeline import modality_to_image

    per_scene = []
    gen_feats: dict[str, list] = {m: [] for m in model.modalities}
    gt_feats: dict[str, list] = {m: [] for m in model.modalities}
    for i, scene in enumerate(scenes):
        lat = model.sample(scene, steps=steps, guidance=guidance, seed=seed + i, use_text=use_text,
                           use_layout=use_layout, use_ref=use_ref, clip_x0=clip_x0)
        decoded = model.decode(lat)
        per_scene.append(score_modalities(decoded, scene))
        for m in model.modalities:
            gen_feats[m].append(fd_features(modality_to_image(m, decoded[m])))
            gt_feats[m].append(fd_features(modality_to_image(m, _frames(scene, m))))
    metrics: dict[str, dict[str, float]] = {}
    for m in model.modalities:
        names = per_scene[0][m].keys() if per_scene else ()
        metrics[m] = {n: float(np.mean([s[m][n] for s in per_scene])) for n in names}
        if per_scene:
            metrics[m]["toy_fd"] = toy_fd(np.concatenate(gen_feats[m]), np.concatenate(gt_feats[m]))
    return EvalReport(metrics, {"scenes": len(scenes), "frames": sum(
        s.sample.views * s.sample.num_frames for s in scenes)}, config_hash(model.config.to_dict()),
        {"steps": steps, "guidance": guidance, "seed": seed})


def _frames(scene: PreparedScene, name: str) -> np.ndarray:
    f = scene.sample.frames
    return {"rgb": f.rgb, "depth": f.depth, "semantic": f.semantic}[name]
