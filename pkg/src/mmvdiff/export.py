"""Lossless PNG export of multi-view videos and a frames-by-views contact sheet."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, ShapeError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _as_rgb(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 5 or frames.shape[-1] not in (1, 3):
        raise ShapeError(f"expected frames [V, K, H, W, 1|3], got {frames.shape}")
    if np.isnan(frames).any() or frames.min() < 0.0 or frames.max() > 1.0:
        raise ContractError("frames must lie in [0, 1]")
    return np.repeat(frames, 3, axis=-1) if frames.shape[-1] == 1 else frames


def contact_sheet(frames: np.ndarray) -> np.ndarray:
    """``[V, K, H, W, C]`` -> ``[K·H, V·W, 3]``: views side by side, one row per frame."""
    x = _as_rgb(frames)
    v, k, h, w, c = x.shape
    return x.transpose(1, 2, 0, 3, 4).reshape(k * h, v * w, c)


def export_video(frames: np.ndarray, out_dir: str | Path, name: str = "rgb") -> list[Path]:
    """Write ``{name}_v{v}_f{k}.png`` per view and frame plus ``{name}_sheet.png``.

    Returns the written paths, frames first and the sheet last.
    """
    x = _as_rgb(frames)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create export directory {out}: {exc}") from exc
    paths = []
    for v in range(x.shape[0]):
        for k in range(x.shape[1]):
            p = out / f"{name}_v{v}_f{k:03d}.png"
            Image.fromarray(to_uint8(x[v, k])).save(p)
            paths.append(p)
    sheet = out / f"{name}_sheet.png"
    Image.fromarray(to_uint8(contact_sheet(x))).save(sheet)
    paths.append(sheet)
    return paths


def read_video(out_dir: str | Path, name: str = "rgb") -> np.ndarray:
    """Inverse of :func:`export_video` (8-bit quantised), ``[V, K, H, W, 3]`` in [0, 1]."""
    out = Path(out_dir)
    files = sorted(out.glob(f"{name}_v*_f*.png"))
    if not files:
        raise FileNotFoundError(f"no {name} frames in {out}")
    index = {}
    for f in files:
        v, k = f.stem[len(name) + 2:].split("_f")
        index[int(v), int(k)] = f
    views = 1 + max(v for v, _ in index)
    frames = 1 + max(k for _, k in index)
    return np.stack([np.stack([np.asarray(Image.open(index[v, k]).convert("RGB"), dtype=np.float64) / 255.0
                               for k in range(frames)]) for v in range(views)])
