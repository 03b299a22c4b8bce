"""Procedural road scenes: a straight multi-lane road, moving cuboids, ego motion.

World frame: x forward along the road, y to the left, z up, ground at z = 0.
Distances are metres, velocities metres per frame.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

CLASS_NAMES = ("car", "truck")
COLORS = {
    "red": (0.80, 0.12, 0.10),
    "blue": (0.12, 0.25, 0.80),
    "white": (0.92, 0.92, 0.90),
    "yellow": (0.92, 0.78, 0.12),
    "black": (0.10, 0.10, 0.12),
    "green": (0.15, 0.60, 0.20),
}
BASE_SIZES = {"car": (4.2, 1.8, 1.5), "truck": (7.5, 2.5, 3.2)}
COUNT_WORDS = ("zero", "one", "two", "three", "four", "five", "six")

ROAD_HALF_WIDTH = 7.0
LANE_CENTERS = (-5.25, -1.75, 1.75, 5.25)
DIVIDERS = (-3.5, 0.0, 3.5)
EGO_LANE = -1.75
MAX_FRAMES = 16
WORLD_HALF_EXTENT = 20.0  # objects stay inside a 40 m box for MAX_FRAMES frames
GROUND_EXTENT = 60.0

_CUBOID_FACES = (
    # (corner indices in winding order, outward normal)
    ((0, 1, 3, 2), (-1.0, 0.0, 0.0)),
    ((4, 6, 7, 5), (1.0, 0.0, 0.0)),
    ((0, 4, 5, 1), (0.0, -1.0, 0.0)),
    ((2, 3, 7, 6), (0.0, 1.0, 0.0)),
    ((1, 5, 7, 3), (0.0, 0.0, 1.0)),
    ((0, 2, 6, 4), (0.0, 0.0, -1.0)),
)


@dataclass(frozen=True)
class Cuboid:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    velocity: tuple[float, float, float]
    cls: str
    color: str

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.cls)

    def center_at(self, k: int) -> np.ndarray:
        return np.asarray(self.center) + k * np.asarray(self.velocity)

    def bounds_at(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.center_at(k)
        half = np.asarray(self.size) / 2
        return c - half, c + half

    def corners_at(self, k: int) -> np.ndarray:
        """``[8, 3]``; corner ``4*i + 2*j + l`` takes max along x if i, y if j, z if l."""
        lo, hi = self.bounds_at(k)
        return np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[l][2]]
                         for i in (0, 1) for j in (0, 1) for l in (0, 1)])

    def faces(self):
        return _CUBOID_FACES

    @property
    def motion(self) -> str:
        vx, vy, _ = self.velocity
        if abs(vx) < 0.05 and abs(vy) < 0.05:
            return "parked"
        if abs(vy) >= 0.05:
            return "moving left" if vy > 0 else "moving right"
        return "moving forward" if vx > 0 else "moving backward"


@dataclass(frozen=True)
class WorldSpec:
    seed: int
    boxes: tuple[Cuboid, ...]
    ego_speed: float
    crossing_x: float | None = None
    ego_lane: float = EGO_LANE
    camera_height: float = 1.5
    road_half_width: float = ROAD_HALF_WIDTH
    dividers: tuple[float, ...] = field(default=DIVIDERS)

    def ego_position(self, k: int) -> np.ndarray:
        return np.array([self.ego_speed * k, self.ego_lane, 0.0])

    def caption(self) -> str:
        if not self.boxes:
            return "empty road"
        groups = Counter((b.color, b.cls, b.motion) for b in self.boxes)
        parts = [f"{COUNT_WORDS[n]} {color} {cls} {motion}" for (color, cls, motion), n in groups.items()]
        return " and ".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["boxes"] = [asdict(b) for b in self.boxes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["boxes"] = tuple(
            Cuboid(tuple(b["center"]), tuple(b["size"]), tuple(b["velocity"]), b["cls"], b["color"])
            for b in d["boxes"]
        )
        d["dividers"] = tuple(d["dividers"])
        return cls(**d)


def _overlaps(a: Cuboid, b: Cuboid, margin: float = 1.0) -> bool:
    for k in range(MAX_FRAMES):
        alo, ahi = a.bounds_at(k)
        blo, bhi = b.bounds_at(k)
        if np.all(alo[:2] - margin < bhi[:2]) and np.all(blo[:2] - margin < ahi[:2]):
            return True
    return False


def _inside_world(b: Cuboid, ego_speed: float) -> bool:
    for k in range(MAX_FRAMES):
        lo, hi = b.bounds_at(k)
        if np.any(np.abs(lo[:2]) > WORLD_HALF_EXTENT) or np.any(np.abs(hi[:2]) > WORLD_HALF_EXTENT):
            return False
        # never drive through the ego vehicle
        ego = np.array([ego_speed * k, EGO_LANE])
        if np.all(lo[:2] - 1.5 < ego) and np.all(ego < hi[:2] + 1.5):
            return False
    return True


def generate_world(seed: int, num_boxes: int | None = None) -> WorldSpec:
    """Deterministic world for ``seed``; ``num_boxes`` overrides the random count."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7)) if num_boxes is None else int(num_boxes)
    ego_speed = float(rng.uniform(0.1, 0.4))
    crossing_x = float(rng.uniform(8.0, 25.0)) if rng.random() < 0.5 else None
    boxes: list[Cuboid] = []
    attempts = 0
    while len(boxes) < n and attempts < 2000:
        attempts += 1
        cls = CLASS_NAMES[int(rng.random() < 0.3)]
        jitter = rng.uniform(0.9, 1.1, size=3)
        size = tuple(float(s) for s in np.asarray(BASE_SIZES[cls]) * jitter)
        lane = float(LANE_CENTERS[int(rng.integers(len(LANE_CENTERS)))])
        x = float(rng.uniform(-12.0, 17.0))
        roll = rng.random()
        if roll < 0.25:
            vel = (0.0, 0.0, 0.0)
        elif roll < 0.4:
            vel = (float(rng.uniform(-0.2, 0.2)), float(rng.choice([-0.1, 0.1])), 0.0)
        else:
            vel = (float(rng.uniform(0.1, 0.5) * rng.choice([-1, 1])), 0.0, 0.0)
        color = str(rng.choice(list(COLORS)))
        box = Cuboid((x, lane, size[2] / 2), size, vel, cls, color)
        if not _inside_world(box, ego_speed) or any(_overlaps(box, o) for o in boxes):
            continue
        boxes.append(box)
    return WorldSpec(seed=seed, boxes=tuple(boxes), ego_speed=ego_speed, crossing_x=crossing_x)


def empty_world(seed: int = 0) -> WorldSpec:
    """Bare ground: no boxes, no road markings, no crossing, static ego."""
    return WorldSpec(seed=seed, boxes=(), ego_speed=0.0, crossing_x=None,
                     road_half_width=0.0, dividers=())
