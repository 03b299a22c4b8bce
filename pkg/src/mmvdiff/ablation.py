"""Ablation harness: one-scene overfit runs over the modality, block and layout-encoder axes.

Every row trains a fresh model on the same scene with the same training seed,
then samples once with DDIM and scores the decoded videos against the
scene's analytic ground truth. Modalities a row does not generate are
reported as ``None``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError
from .evaluate import score_modalities
from .metrics import _sig
from .pipeline import MODALITIES, DiffusionModel, ModelConfig
from .toyscene.io import make_scene
from .training import TrainConfig, Trainer

AXES = ("modalities", "blocks", "layout-encoder")
LOSS_WINDOW = 50  # trailing steps averaged for the "final loss" of a run


@dataclass
class OverfitProtocol:
    """Scene, training and sampling settings shared by every row of an ablation."""

    scene_seed: int = 0
    views: int = 2
    frames: int = 5
    size: int = 32
    steps: int = 2000
    lr: float = 6e-4  # 2e-4 leaves the high-noise steps underfit after 2000 steps
    train_seed: int = 0
    sample_steps: int = 50
    guidance: float = 1.0
    sample_seed: int = 0


@dataclass
class OverfitResult:
    label: str
    config: ModelConfig
    losses: list[float]
    metrics: dict[str, dict[str, float] | None]
    seconds: float
    model: DiffusionModel | None = field(default=None, repr=False)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return float(np.mean(self.losses[-LOSS_WINDOW:]))

    def row(self) -> dict:
        return {"label": self.label, "modalities": list(self.config.modalities),
                "use_spatiotemporal": self.config.use_spatiotemporal,
                "use_cross_modal": self.config.use_cross_modal,
                "layout_encoder": self.config.layout_encoder,
                "initial_loss": self.initial_loss, "final_loss": self.final_loss,
                "metrics": self.metrics, "seconds": self.seconds}


def run_overfit(config: ModelConfig, protocol: OverfitProtocol, label: str = "",
                callback: Callable[[int, float], None] | None = None) -> OverfitResult:
    """Train ``config`` on one scene for ``protocol.steps`` steps, then sample and score it."""
    start = time.perf_counter()
    model = DiffusionModel(config)
    sample = make_scene(protocol.scene_seed, views=protocol.views, frames=protocol.frames,
                        height=protocol.size, width=protocol.size)
    scene = model.prepare(sample)
    trainer = Trainer(model, TrainConfig(steps=protocol.steps, lr=protocol.lr, seed=protocol.train_seed))
    losses = trainer.fit([scene], callback=callback)
    lat = model.sample(scene, steps=protocol.sample_steps, guidance=protocol.guidance,
                       seed=protocol.sample_seed)
    scored = score_modalities(model.decode(lat), scene)
    metrics = {m: scored.get(m) for m in MODALITIES}
    return OverfitResult(label, config, losses, metrics, time.perf_counter() - start, model)


def axis_configs(axis: str, base: ModelConfig | None = None) -> list[tuple[str, ModelConfig]]:
    """Row labels and model configs for one ablation axis."""
    base = base or ModelConfig()
    if axis == "modalities":
        return [("RGB", replace(base, modalities=("rgb",))),
                ("RGB+Depth", replace(base, modalities=("rgb", "depth"))),
                ("RGB+Depth+Semantic", replace(base, modalities=MODALITIES))]
    if axis == "blocks":
        return [("L1", replace(base, use_spatiotemporal=False, use_cross_modal=False)),
                ("L1+L3", replace(base, use_spatiotemporal=False, use_cross_modal=True)),
                ("L1+L2+L3", replace(base, use_spatiotemporal=True, use_cross_modal=True))]
    if axis == "layout-encoder":
        return [("unified", replace(base, layout_encoder="unified")),
                ("codec", replace(base, layout_encoder="codec"))]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def run_axis(axis: str, protocol: OverfitProtocol | None = None, base: ModelConfig | None = None,
             log: Callable[[str], None] | None = None) -> list[OverfitResult]:
    protocol = protocol or OverfitProtocol()
    results = []
    for label, cfg in axis_configs(axis, base):
        res = run_overfit(cfg, protocol, label)
        res.model = None
        results.append(res)
        if log is not None:
            log(f"{axis} {label}: loss {res.initial_loss:.4f} -> {res.final_loss:.4f}, {res.metrics}")
    return results


def ablation_report(axis: str, results: list[OverfitResult], protocol: OverfitProtocol) -> str:
    body = {"axis": axis, "protocol": protocol.__dict__, "rows": [r.row() for r in results]}
    return json.dumps(_sig(body), sort_keys=True, indent=2)
