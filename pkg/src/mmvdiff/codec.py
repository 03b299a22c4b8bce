"""Frozen orthonormal patch codec shared by every modality.

Each non-overlapping 8x8x3 pixel patch is flattened and multiplied by a fixed
192x192 orthonormal matrix. The matrix is the Q factor of a seeded random
matrix whose leading columns are replaced by smooth patch patterns (constant
and low-frequency cosines, per colour channel), so the retained leading
channels span the smooth part of each patch. Decoding is the transpose with
unretained channels treated as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

PATCH = 8
PATCH_DIM = PATCH * PATCH * 3

# Low-frequency (fy, fx) cosine pairs, ordered by increasing frequency.
_FREQS = [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (1, 2), (2, 1), (2, 2),
          (0, 3), (3, 0), (1, 3), (3, 1), (2, 3), (3, 2), (3, 3)]
_COLOUR_FREQS = 3  # leading frequencies kept per colour channel; the rest as luminance


def _smooth_patterns() -> np.ndarray:
    """Smooth patch vectors ``[192, n]`` in retention order.

    Colour (one column per RGB channel) for the constant and first two
    cosines, then luminance-only cosines, then the remaining colour detail.
    The first 16 columns hold about 0.007 RGB MSE on toy scenes.
    """
    ys = (np.arange(PATCH) + 0.5) / PATCH
    lum = np.ones(3) / np.sqrt(3.0)
    rgb = list(np.eye(3))
    order = [(f, c) for f in _FREQS[:_COLOUR_FREQS] for c in rgb]
    order += [(f, lum) for f in _FREQS[_COLOUR_FREQS:]]
    order += [(f, c) for f in _FREQS[_COLOUR_FREQS:] for c in rgb]
    cols = []
    for (fy, fx), colour in order:
        spatial = np.outer(np.cos(np.pi * fy * ys), np.cos(np.pi * fx * ys))
        cols.append((spatial[:, :, None] * colour[None, None, :]).reshape(-1))
    return np.stack(cols, axis=1)


def orthonormal_basis(seed: int = 0) -> np.ndarray:
    """192x192 orthonormal matrix whose leading columns span smooth patches."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((PATCH_DIM, PATCH_DIM))
    smooth = _smooth_patterns()
    # Gram-Schmidt order keeps only independent smooth directions up front.
    keep = []
    for j in range(smooth.shape[1]):
        cand = np.stack(keep + [smooth[:, j]], axis=1)
        if np.linalg.matrix_rank(cand, tol=1e-8) == len(keep) + 1:
            keep.append(smooth[:, j])
        if len(keep) == 48:
            break
    m[:, : len(keep)] = np.stack(keep, axis=1)
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))[None, :]
    return q


@dataclass
class LatentGrid:
    """Latent tensor ``[V, K', H', W', C]`` with its modality tag."""

    data: np.ndarray
    modality: str = "rgb"
    axes: tuple[str, ...] = field(default=("view", "frame", "height", "width", "channel"))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class PatchCodec:
    """Linear patch transform standing in for a pretrained video VAE."""

    def __init__(self, seed: int = 0, channels: int = 16):
        if not 1 <= channels <= PATCH_DIM:
            raise ContractError(f"retained channels must lie in [1, {PATCH_DIM}], got {channels}")
        self.seed = seed
        self.channels = channels
        self.basis = orthonormal_basis(seed)
        self._enc = self.basis[:, :channels]

    @property
    def full(self) -> bool:
        return self.channels == PATCH_DIM

    def config(self) -> dict:
        return {"seed": self.seed, "channels": self.channels, "patch": PATCH}

    def latent_bounds(self, low: float = 0.0, high: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(lo, hi)`` reachable by encoding images with values in ``[low, high]``."""
        a, b = low * self._enc, high * self._enc
        return np.minimum(a, b).sum(axis=0), np.maximum(a, b).sum(axis=0)

    def encode(self, video: np.ndarray, modality: str = "rgb") -> LatentGrid:
        video = np.asarray(video)
        if video.ndim != 5 or video.shape[-1] != 3:
            raise ShapeError(f"codec expects [V, K, H, W, 3], got {video.shape}")
        v, k, h, w, _ = video.shape
        if h % PATCH or w % PATCH:
            raise ShapeError(f"frame size {h}x{w} is not divisible by {PATCH}")
        patches = video.reshape(v, k, h // PATCH, PATCH, w // PATCH, PATCH, 3)
        patches = patches.transpose(0, 1, 2, 4, 3, 5, 6).reshape(v, k, h // PATCH, w // PATCH, PATCH_DIM)
        lat = patches.astype(np.float64) @ self._enc
        return LatentGrid(lat.astype(video.dtype if video.dtype.kind == "f" else np.float32), modality)

    def decode(self, latents) -> np.ndarray:
        lat = latents.data if isinstance(latents, LatentGrid) else np.asarray(latents)
        if lat.ndim != 5 or lat.shape[-1] != self.channels:
            raise ShapeError(f"codec expects [V, K, H', W', {self.channels}] latents, got {lat.shape}")
        v, k, hh, ww, _ = lat.shape
        patches = lat.astype(np.float64) @ self._enc.T
        video = patches.reshape(v, k, hh, ww, PATCH, PATCH, 3).transpose(0, 1, 2, 4, 3, 5, 6)
        return video.reshape(v, k, hh * PATCH, ww * PATCH, 3).astype(lat.dtype)

    def encode_reference(self, frames: np.ndarray, modality: str = "rgb") -> LatentGrid:
        frames = np.asarray(frames)
        if frames.ndim != 5 or frames.shape[1] != 1:
            raise ContractError(f"reference frames must be [V, 1, H, W, 3], got {frames.shape}")
        return self.encode(frames, modality)


# -- modality <-> image conversions ------------------------------------------------

DEPTH_REF = 1.5
DEPTH_MAX = 100.0


def depth_to_image(depth: np.ndarray, d_ref: float = DEPTH_REF) -> np.ndarray:
    """Metric depth ``[..., 1]`` -> inverse depth in [0, 1] replicated to 3 channels."""
    d = np.asarray(depth, dtype=np.float64)[..., 0]
    inv = np.where(d > 0, np.clip(d_ref / np.where(d > 0, d, 1.0), 0.0, 1.0), 0.0)
    return np.repeat(inv[..., None], 3, axis=-1).astype(np.float32)


def image_to_depth(img: np.ndarray, d_ref: float = DEPTH_REF, d_max: float = DEPTH_MAX) -> np.ndarray:
    inv = np.asarray(img, dtype=np.float64).mean(axis=-1)
    inv = np.clip(inv, d_ref / d_max, 1.0)
    return (d_ref / inv)[..., None].astype(np.float32)


def semantic_to_image(ids: np.ndarray, palette: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)[..., 0].astype(np.int64)
    return palette[ids].astype(np.float32)


def image_to_semantic(img: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Nearest palette colour per pixel -> ids ``[..., 1]``."""
    img = np.asarray(img, dtype=np.float64)
    d = ((img[..., None, :] - np.asarray(palette)) ** 2).sum(-1)
    return d.argmin(axis=-1)[..., None].astype(np.float32)
