"""Scene records and their on-disk dataset format.

Each scene lives in ``<dir>/scene_<seed>/`` with a ``meta.json`` and one
binary tensor file per modality and view. Tensor files carry a 16-byte header
(magic ``MMVT``, dtype code, rank, four u16 extents) followed by
little-endian float32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..text import ScenePrompt, Vocabulary, default_vocabulary
from .camera import CameraRig, make_rig
from .layout import LayoutMaps, make_layout_maps, occupancy_points
from .render import FrameBundle, render_frames
from .world import MAX_FRAMES, WorldSpec, generate_world

TENSOR_MAGIC = b"MMVT"
_HEADER = struct.Struct("<4sBB2x4H")
_DTYPES = {0: np.dtype("<f4")}
FORMAT_VERSION = 1

PER_VIEW = ("rgb", "depth", "semantic", "box", "road", "occ")


@dataclass
class SceneSample:
    seed: int
    world: WorldSpec
    rig: CameraRig
    frames: FrameBundle
    layout: LayoutMaps
    occupancy: np.ndarray  # [P, 5] (frame, x, y, z, class_id)
    prompt: ScenePrompt
    caption: str

    @property
    def views(self) -> int:
        return self.rig.views

    @property
    def num_frames(self) -> int:
        return self.frames.rgb.shape[1]

    def reference(self) -> FrameBundle:
        """Frame 0 of every modality, ``[V, 1, H, W, ·]``."""
        f = self.frames
        return FrameBundle(f.rgb[:, :1], f.depth[:, :1], f.semantic[:, :1])

    def _per_view_arrays(self) -> dict[str, np.ndarray]:
        f, lay = self.frames, self.layout
        return {"rgb": f.rgb, "depth": f.depth, "semantic": f.semantic,
                "box": lay.box_map, "road": lay.road_map, "occ": lay.occ_layout_map}


def make_scene(seed: int, views: int = 2, frames: int = 5, height: int = 32, width: int = 32,
               vocab: Vocabulary | None = None, num_boxes: int | None = None,
               world: WorldSpec | None = None) -> SceneSample:
    """Generate, render and annotate one scene deterministically from ``seed``."""
    if not 1 <= frames <= MAX_FRAMES:
        raise ValueError(f"frames must lie in [1, {MAX_FRAMES}], got {frames}")
    vocab = vocab or default_vocabulary()
    world = world if world is not None else generate_world(seed, num_boxes)
    rig = make_rig(views, width, height)
    caption = world.caption()
    prompt = ScenePrompt(vocab.encode(caption), np.stack([c.params_vector() for c in rig.cameras]))
    return SceneSample(seed, world, rig, render_frames(world, rig, frames),
                       make_layout_maps(world, rig, frames),
                       occupancy_points(world, frames).astype(np.float32), prompt, caption)


# -- tensor files -------------------------------------------------------------------

def write_tensor(path: str | Path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim > 4:
        raise FormatError(f"{path}: rank {a.ndim} exceeds 4")
    if any(e > 0xFFFF for e in a.shape):
        raise FormatError(f"{path}: extent in {a.shape} exceeds 65535")
    extents = list(a.shape) + [0] * (4 - a.ndim)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TENSOR_MAGIC, 0, a.ndim, *extents))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, code, rank, *extents = _HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code not in _DTYPES or rank > 4:
        raise FormatError(f"{path}: unsupported dtype code {code} or rank {rank}")
    shape = tuple(extents[:rank])
    dtype = _DTYPES[code]
    expected = _HEADER.size + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(shape).astype(np.float32)


# -- datasets -------------------------------------------------------------------

def scene_dir(root: str | Path, seed: int) -> Path:
    return Path(root) / f"scene_{seed}"


def write_scene(sample: SceneSample, root: str | Path) -> Path:
    d = scene_dir(root, sample.seed)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": sample.seed,
        "frames": sample.num_frames,
        "world": sample.world.to_dict(),
        "rig": sample.rig.to_dict(),
        "caption": sample.caption,
        "tokens": list(sample.prompt.caption_tokens),
        "camera_params": np.asarray(sample.prompt.camera_params).tolist(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    for name, arr in sample._per_view_arrays().items():
        for v in range(sample.views):
            write_tensor(d / f"{name}_v{v}.mmvt", arr[v])
    write_tensor(d / "occupancy.mmvt", sample.occupancy)
    return d


def read_scene(path: str | Path) -> SceneSample:
    d = Path(path)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
        world = WorldSpec.from_dict(meta["world"])
        rig = CameraRig.from_dict(meta["rig"])
        prompt = ScenePrompt(list(meta["tokens"]), np.asarray(meta["camera_params"], dtype=np.float64))
        seed, caption = int(meta["seed"]), meta["caption"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{meta_path}: unreadable scene metadata ({exc})") from exc
    arrays = {}
    for name in PER_VIEW:
        arrays[name] = np.stack([read_tensor(d / f"{name}_v{v}.mmvt") for v in range(rig.views)])
    occupancy = read_tensor(d / "occupancy.mmvt")
    frames = FrameBundle(arrays["rgb"], arrays["depth"], arrays["semantic"])
    layout = LayoutMaps(arrays["box"], arrays["road"], arrays["occ"])
    return SceneSample(seed, world, rig, frames, layout, occupancy, prompt, caption)


def write_dataset(samples, root: str | Path) -> list[Path]:
    Path(root).mkdir(parents=True, exist_ok=True)
    return [write_scene(s, root) for s in samples]


def read_dataset(root: str | Path) -> list[SceneSample]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: dataset directory not found")
    dirs = sorted((p for p in root.glob("scene_*") if p.is_dir()),
                  key=lambda p: int(p.name.split("_", 1)[1]))
    return [read_scene(p) for p in dirs]
