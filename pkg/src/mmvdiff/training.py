"""Noise-prediction training: weighted per-modality loss, AdamW, checkpoints.

Every step draws its randomness from ``default_rng([seed, step])``, so a run
resumed from a checkpoint replays exactly the steps it would have taken.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .conditioning import with_dropped, draw_dropout
from .errors import ConfigError, FormatError, ShapeError, TrainingDivergenceError
from .pipeline import DiffusionModel, ModelConfig, PreparedScene, config_hash
from .tensor import Tape, Tensor
from .validation import check_scalar_fields


@dataclass
class AdamWHyper:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    loss_weights: tuple[float, ...] | None = None  # lambda_m; None means 1 for every modality
    p_text: float = 0.1
    p_layout: float = 0.1
    p_ref: float = 0.5
    sync_t: bool = False
    seed: int = 0

    def __post_init__(self):
        check_scalar_fields(self)
        if self.loss_weights is not None:
            self.loss_weights = tuple(float(w) for w in self.loss_weights)
            if any(w < 0 for w in self.loss_weights) or not any(w > 0 for w in self.loss_weights):
                raise ConfigError(f"loss weights must be >= 0 with one positive, got {self.loss_weights}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def weights_for(self, modalities: int) -> tuple[float, ...]:
        w = self.loss_weights or (1.0,) * modalities
        if len(w) != modalities:
            raise ConfigError(f"{len(w)} loss weights for {modalities} modalities")
        return w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = None if self.loss_weights is None else list(self.loss_weights)
        return d


def diffusion_loss(eps_hat: Sequence[Tensor], eps: Sequence, weights: Sequence[float]) -> Tensor:
    """``sum_m lambda_m * mean((eps_m - eps_hat_m)^2)``."""
    if not (len(eps_hat) == len(eps) == len(weights)):
        raise ShapeError(f"{len(eps_hat)} predictions, {len(eps)} targets, {len(weights)} weights")
    total = None
    for pred, target, w in zip(eps_hat, eps, weights):
        target = target if isinstance(target, Tensor) else Tensor._wrap(np.asarray(target, dtype=pred.dtype))
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        term = T.mean(T.square(pred - target)) * float(w)
        total = term if total is None else total + term
    return total


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 hyper: AdamWHyper) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-weight-decay Adam step (``step`` is 1-based); returns ``(p, m, v)``."""
    if p.shape != g.shape:
        raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
    m_hat = m / (1.0 - hyper.beta1**step)
    v_hat = v / (1.0 - hyper.beta2**step)
    p = p - hyper.lr * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * p)
    return p.astype(g.dtype, copy=False), m.astype(g.dtype, copy=False), v.astype(g.dtype, copy=False)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


def sample_timesteps(rng: np.random.Generator, modalities: int, num_steps: int, sync: bool) -> list[int]:
    if sync:
        return [int(rng.integers(1, num_steps + 1))] * modalities
    return [int(x) for x in rng.integers(1, num_steps + 1, size=modalities)]


def scene_loss(model: DiffusionModel, scene: PreparedScene, config: TrainConfig,
               rng: np.random.Generator) -> Tensor:
    """Noise one scene, drop conditions, predict and score; runs under the caller's tape."""
    sched = model.schedule
    mods = len(model.modalities)
    t = sample_timesteps(rng, mods, sched.num_steps, config.sync_t)
    eps = rng.standard_normal(scene.latents.shape).astype(model.dtype)
    ab = np.array([sched.alpha_bar(ti) for ti in t]).reshape(-1, 1, 1, 1, 1, 1)
    x_t = (np.sqrt(ab) * scene.latents + np.sqrt(1.0 - ab) * eps).astype(model.dtype)
    flags = draw_dropout(rng, config.p_text, config.p_layout, config.p_ref)
    conds = with_dropped(model.encode_conditions(scene), **flags)
    eps_hat = model.predict_noise(x_t, t, conds)
    preds = [eps_hat[i] for i in range(mods)]
    return diffusion_loss(preds, list(eps), config.weights_for(mods))


@dataclass
class OptimizerState:
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)


class Trainer:
    def __init__(self, model: DiffusionModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = OptimizerState()
        self.named = dict(model.named_parameters())
        for name, p in self.named.items():
            self.state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))

    @property
    def step(self) -> int:
        return self.state.step

    def train_step(self, batch: Sequence[PreparedScene]) -> float:
        """One optimisation step over ``batch``; returns the (pre-update) loss."""
        cfg = self.config
        step = self.state.step
        rng = np.random.default_rng([cfg.seed, step])
        names = list(self.named)
        leaves = [self.named[n] for n in names]
        with Tape() as tape:
            losses = [scene_loss(self.model, scene, cfg, rng) for scene in batch]
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            if len(losses) > 1:
                loss = loss * (1.0 / len(losses))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergenceError(step, value)
            grads = tape.gradient(loss, leaves)
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip)
        hyper = cfg.hyper
        for name, p, g in zip(names, leaves, grads):
            m, v = self.state.moments[name]
            p.data, m, v = adamw_update(p.data, g, m, v, step + 1, hyper)
            self.state.moments[name] = (m, v)
        self.state.step = step + 1
        return value

    def fit(self, scenes: Sequence[PreparedScene], steps: int | None = None,
            callback: Callable[[int, float], None] | None = None) -> list[float]:
        """Run ``steps`` more steps, cycling through ``scenes`` in batches."""
        steps = self.config.steps if steps is None else steps
        bs = self.config.batch_size
        losses = []
        for _ in range(steps):
            start = (self.state.step * bs) % len(scenes)
            batch = [scenes[(start + i) % len(scenes)] for i in range(bs)]
            loss = self.train_step(batch)
            losses.append(loss)
            if callback is not None:
                callback(self.state.step, loss)
        return losses

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        """``metadata`` (e.g. the data shape) is stored alongside the training config."""
        entries = {}
        for name, p in self.named.items():
            m, v = self.state.moments[name]
            entries[f"param/{name}"] = p.data
            entries[f"adam_m/{name}"] = m
            entries[f"adam_v/{name}"] = v
        train = {**self.config.to_dict(), **(metadata or {})}
        save_checkpoint(path, entries, self.state.step, self.model.config.to_dict(), train)

    def load(self, path: str | Path) -> None:
        ckpt = load_checkpoint(path, expected_model_config=self.model.config.to_dict())
        for name, p in self.named.items():
            try:
                p.data = ckpt.entries[f"param/{name}"].astype(p.data.dtype)
                m = ckpt.entries[f"adam_m/{name}"].astype(p.data.dtype)
                v = ckpt.entries[f"adam_v/{name}"].astype(p.data.dtype)
            except KeyError as exc:
                raise FormatError(f"{path}: missing entry {exc}") from None
            self.state.moments[name] = (m, v)
        self.state.step = ckpt.step


# -- checkpoint file --------------------------------------------------------------

CKPT_MAGIC = b"MMVDCKPT"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    step: int
    model_config: dict
    train_config: dict
    config_hash: str


def save_checkpoint(path: str | Path, entries: dict[str, np.ndarray], step: int,
                    model_config: dict, train_config: dict | None = None) -> None:
    """Binary checkpoint: header, then one record per named array.

    Step, configs and the model-config hash travel as extra records so the
    file stays a flat list of named arrays.
    """
    meta = {
        "__step__": np.array([step], dtype="<i8"),
        "__model_config__": _json_bytes(model_config),
        "__train_config__": _json_bytes(train_config or {}),
        "__config_hash__": np.frombuffer(config_hash(model_config).encode(), dtype="u1"),
    }
    records = {**meta, **entries}
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(records)))
        for name, arr in records.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            if np.dtype(dt) not in _DTYPE_CODES:
                raise FormatError(f"{path}: cannot store dtype {arr.dtype} for {name}")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[np.dtype(dt)], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path: str | Path, expected_model_config: dict | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    reader = _Reader(raw, path)
    if reader.take(8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = reader.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (n,) = reader.unpack("<I")
        name = reader.take(n).decode()
        code, rank = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = reader.unpack(f"<{rank}Q")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        entries[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
    if reader.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - reader.pos} trailing bytes")
    try:
        step = int(entries.pop("__step__")[0])
        model_config = json.loads(entries.pop("__model_config__").tobytes())
        train_config = json.loads(entries.pop("__train_config__").tobytes())
        stored_hash = entries.pop("__config_hash__").tobytes().decode()
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or corrupt metadata ({exc})") from None
    if stored_hash != config_hash(model_config):
        raise FormatError(f"{path}: config hash {stored_hash} does not match its stored config")
    if expected_model_config is not None:
        expected = config_hash(expected_model_config)
        if expected != stored_hash:
            raise ConfigError(
                f"{path}: checkpoint config hash {stored_hash} differs from the current config hash {expected}"
            )
    return Checkpoint(entries, step, model_config, train_config, stored_hash)


def model_from_checkpoint(path: str | Path) -> tuple[DiffusionModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = DiffusionModel(ModelConfig.from_dict(ckpt.model_config))
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in ckpt.entries:
            raise FormatError(f"{path}: missing entry {key}")
        p.data = ckpt.entries[key].astype(p.data.dtype)
    return model, ckpt


def _json_bytes(d: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(d, sort_keys=True).encode(), dtype="u1")


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
