"""End-to-end glue: scenes -> latents and conditions -> noise prediction -> samples -> decoded videos."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .codec import PATCH, PatchCodec, depth_to_image, image_to_depth, image_to_semantic, semantic_to_image
from .conditioning import ConditionEncoder, ConditionSet, with_dropped
from .diffusion import NoiseSchedule, ddim_timesteps, make_linear_schedule, sample_loop
from .errors import ConfigError
from .geometry import SceneGeometry
from .mmdit import MMDiT, MMDiTConfig
from .nn import HashGridParams, Module
from .tensor import Tensor
from .text import ScenePrompt
from .toyscene.io import SceneSample
from .toyscene.layout import LayoutMaps
from .toyscene.render import SEMANTIC_PALETTE
from .validation import check_scalar_fields

MODALITIES = ("rgb", "depth", "semantic")


def modality_to_image(name: str, frames: np.ndarray) -> np.ndarray:
    """Ground-truth frames of one modality -> the 3-channel image the codec sees."""
    if name == "rgb":
        return np.asarray(frames, dtype=np.float32)
    if name == "depth":
        return depth_to_image(frames)
    if name == "semantic":
        return semantic_to_image(frames, SEMANTIC_PALETTE)
    raise ConfigError(f"unknown modality {name!r}")


def image_to_modality(name: str, image: np.ndarray) -> np.ndarray:
    if name == "rgb":
        return np.clip(image, 0.0, 1.0).astype(np.float32)
    if name == "depth":
        return image_to_depth(image)
    if name == "semantic":
        return image_to_semantic(image, SEMANTIC_PALETTE)
    raise ConfigError(f"unknown modality {name!r}")


def _gt_frames(sample: SceneSample, name: str) -> np.ndarray:
    return {"rgb": sample.frames.rgb, "depth": sample.frames.depth,
            "semantic": sample.frames.semantic}[name]


@dataclass
class ModelConfig:
    """Everything that determines the network and codec; hashed into checkpoints."""

    modalities: tuple[str, ...] = MODALITIES
    latent_channels: int = 16
    codec_seed: int = 0
    latent_scale: float = 0.4  # keeps the per-patch mean channels near a few units
    text_dim: int = 64
    cond_dim: int = 32
    layout_encoder: str = "unified"
    layers: int = 4
    alpha1: int = 2
    alpha2: int = 2
    heads: int = 4
    width: int = 128
    use_spatiotemporal: bool = True
    use_cross_modal: bool = True
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hash_grid: HashGridParams = field(default_factory=HashGridParams)
    seed: int = 0

    def __post_init__(self):
        check_scalar_fields(self)
        self.modalities = tuple(self.modalities)
        if isinstance(self.hash_grid, dict):
            try:
                self.hash_grid = HashGridParams(**self.hash_grid)
            except TypeError as exc:
                raise ConfigError(f"bad hash_grid settings: {exc}") from None
        if not self.latent_scale > 0:
            raise ConfigError(f"latent_scale must be positive, got {self.latent_scale}")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown or not self.modalities:
            raise ConfigError(f"modalities must be a non-empty subset of {MODALITIES}, got {self.modalities}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def dit_config(self) -> MMDiTConfig:
        return MMDiTConfig(
            layers=self.layers, alpha1=self.alpha1, alpha2=self.alpha2, heads=self.heads,
            width=self.width, modalities=len(self.modalities), latent_channels=self.latent_channels,
            input_channels=2 * self.latent_channels, text_dim=self.text_dim,
            num_train_steps=self.num_train_steps, use_spatiotemporal=self.use_spatiotemporal,
            use_cross_modal=self.use_cross_modal, hash_grid=self.hash_grid,
        )


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(d: dict) -> str:
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


@dataclass
class PreparedScene:
    """A scene reduced to what the model consumes: latents, raw conditions and ground truth."""

    sample: SceneSample
    latents: np.ndarray  # [M, V, K, H', W', C_lat]
    reference: np.ndarray  # [M, V, 1, H', W', C_lat]
    prompt: ScenePrompt
    layout: LayoutMaps
    occupancy: np.ndarray
    geometry: SceneGeometry


class DiffusionModel(Module):
    """Condition encoders plus the transformer, with the frozen codec alongside."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self._codec = PatchCodec(cfg.codec_seed, cfg.latent_channels)
        self.encoder = ConditionEncoder(rng, cfg.latent_channels, cfg.text_dim, cfg.cond_dim,
                                        layout_encoder=cfg.layout_encoder, codec=self._codec)
        self.dit = MMDiT(cfg.dit_config(), rng)
        self._schedule = make_linear_schedule(cfg.num_train_steps, cfg.beta_start, cfg.beta_end)

    @property
    def codec(self) -> PatchCodec:
        return self._codec

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.config.modalities

    def prepare(self, sample: SceneSample) -> PreparedScene:
        k = sample.num_frames
        if sample.rig.height % PATCH or sample.rig.width % PATCH:
            raise ConfigError(f"frame size must be divisible by {PATCH}")
        lat = np.stack([self.to_latents(modality_to_image(m, _gt_frames(sample, m)))
                        for m in self.modalities]).astype(np.float32)
        geometry = SceneGeometry(sample.rig, np.stack([sample.world.ego_position(i) for i in range(k)]))
        return PreparedScene(sample, lat, lat[:, :, :1].copy(), sample.prompt, sample.layout,
                             sample.occupancy, geometry)

    def encode_conditions(self, scene: PreparedScene) -> ConditionSet:
        return self.encoder.encode(scene.prompt, scene.layout, scene.reference, scene.occupancy,
                                   scene.geometry)

    def predict_noise(self, x_t, t, conds: ConditionSet) -> Tensor:
        """``x_t [M, V, K, H', W', C_lat]`` plus per-modality timesteps -> ``eps_hat``."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor._wrap(np.asarray(x_t, dtype=self.dtype))
        z = self.encoder.assemble(conds, x_t)
        return self.dit(z, conds, t)

    def sample(self, scene: PreparedScene, steps: int = 50, guidance: float = 2.0, eta: float = 0.0,
               seed: int = 0, use_text: bool = True, use_layout: bool = True,
               use_ref: bool = False, clip_x0: bool = True) -> np.ndarray:
        """DDIM + classifier-free guidance; returns latents ``[M, V, K, H', W', C_lat]``.

        The conditional branch keeps the requested families; the unconditional
        branch drops all of them. ``clip_x0`` keeps each step's x0 estimate
        inside the latent box that valid images occupy.
        """
        base = self.encode_conditions(scene)
        cond = with_dropped(base, text=not use_text, layout=not use_layout, ref=not use_ref)
        uncond = with_dropped(base, text=True, layout=True, ref=True)
        m = len(self.modalities)

        def denoise(latents, t, conditional):
            eps = self.predict_noise(np.stack(latents), [t] * m, cond if conditional else uncond)
            return list(eps.data)

        shape = scene.latents.shape[1:]
        out = sample_loop(denoise, [shape] * m, ddim_timesteps(self.config.num_train_steps, steps),
                          self._schedule, guidance=guidance, eta=eta, seed=seed, dtype=self.dtype,
                          x0_range=self.x0_range if clip_x0 else None)
        return np.stack(out)

    def to_latents(self, images: np.ndarray) -> np.ndarray:
        """``[0, 1]`` images -> diffusion latents.

        Images are mapped to ``[-1, 1]`` before encoding so the latents are
        roughly centred, then multiplied by ``latent_scale``.
        """
        return self._codec.encode(2.0 * np.asarray(images) - 1.0).data * self.config.latent_scale

    def from_latents(self, latents: np.ndarray) -> np.ndarray:
        return (self._codec.decode(np.asarray(latents) / self.config.latent_scale) + 1.0) / 2.0

    @property
    def x0_range(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self._codec.latent_bounds(-1.0, 1.0)
        lo, hi = lo * self.config.latent_scale, hi * self.config.latent_scale
        return lo.astype(self.dtype), hi.astype(self.dtype)

    def decode(self, latents: np.ndarray) -> dict[str, np.ndarray]:
        """Latents per modality -> rgb in [0,1], metric depth and semantic ids, each ``[V, K, H, W, ·]``."""
        return {m: image_to_modality(m, self.from_latents(latents[i]))
                for i, m in enumerate(self.modalities)}
