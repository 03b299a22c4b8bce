"""Toy-scale evaluation metrics and the JSON report that carries them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericDomainError, ShapeError, UndefinedMetricError

FD_POOL = 16
PSD_TOL = 1e-8


def absrel(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean of ``|pred - gt| / gt`` over the valid pixels (default: ``gt > 0``)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise UndefinedMetricError("AbsRel over an empty mask")
    g = gt[valid]
    if (g <= 0).any():
        raise NumericDomainError("ground-truth depth must be positive on the mask")
    return float(np.mean(np.abs(pred[valid] - g) / g))


def miou(pred: np.ndarray, gt: np.ndarray, classes, ignore: int | None = None) -> float:
    """Mean IoU over the classes of ``classes`` that occur in ``gt``."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if ignore is not None:
        keep = gt != ignore
        pred, gt = pred[keep], gt[keep]
    ious = []
    for c in classes:
        in_gt = gt == c
        if not in_gt.any():
            continue
        in_pred = pred == c
        ious.append(np.sum(in_gt & in_pred) / np.sum(in_gt | in_pred))
    if not ious:
        raise UndefinedMetricError("no listed class occurs in the ground truth")
    return float(np.mean(ious))


def rgb_mse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    a = 0.5 * (a + a.T)
    w, q = np.linalg.eigh(a)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericDomainError(f"matrix is not PSD (smallest eigenvalue {w.min():.3g})")
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def _gaussian(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    d = feats - mu
    # population covariance: makes the 1-D case equal (mu1-mu2)^2 + (sigma1-sigma2)^2 exactly
    return mu, d.T @ d / len(feats)


def toy_fd(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets ``[n, d]`` and ``[m, d]``.

    ``Tr(sqrt(Sa Sb))`` is computed as ``Tr(sqrt(Sa^1/2 Sb Sa^1/2))``, which is
    symmetric PSD and so takes an eigen square root.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if not len(a) or not len(b):
        raise UndefinedMetricError("Frechet distance of an empty feature set")
    mu_a, s_a = _gaussian(a)
    mu_b, s_b = _gaussian(b)
    ra = _psd_sqrt(s_a)
    cross = np.trace(_psd_sqrt(ra @ s_b @ ra))
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(s_a) + np.trace(s_b) - 2.0 * cross)
    return max(fd, 0.0)


def fd_features(frames: np.ndarray, pool: int = FD_POOL) -> np.ndarray:
    """Fixed features: each frame ``[..., H, W, C]`` average-pooled by ``pool`` and flattened."""
    frames = np.asarray(frames, dtype=np.float64)
    *lead, h, w, c = frames.shape
    if h % pool or w % pool:
        raise ShapeError(f"frame {h}x{w} is not divisible by the pool size {pool}")
    x = frames.reshape(-1, h // pool, pool, w // pool, pool, c).mean(axis=(2, 4))
    return x.reshape(x.shape[0], -1)


def _sig(x):
    if isinstance(x, float):
        return float(f"{x:.6g}") if math.isfinite(x) else x
    if isinstance(x, dict):
        return {k: _sig(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_sig(v) for v in x]
    return x


@dataclass
class EvalReport:
    """Per-modality metrics, sample counts and the config hash of the evaluated model."""

    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for mod, vals in self.metrics.items():
            for name, val in vals.items():
                if val is None:
                    continue
                if name in ("absrel", "toy_fd", "rgb_mse") and val < 0:
                    raise NumericDomainError(f"{mod}.{name} must be >= 0, got {val}")
                if name == "miou" and not 0.0 <= val <= 1.0:
                    raise NumericDomainError(f"{mod}.miou must lie in [0, 1], got {val}")

    def to_json(self) -> str:
        self.validate()
        body = {"metrics": _sig(self.metrics), "counts": self.counts, "config_hash": self.config_hash,
                "extra": _sig(self.extra)}
        return json.dumps(body, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            d = json.loads(text)
            report = cls(d["metrics"], d["counts"], d["config_hash"], d.get("extra", {}))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed report: {exc}") from None
        report.validate()
        return report

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())
