"""Multi-modal multi-view diffusion transformer.

Latents of all modalities are stacked on a leading axis, ``h [M, V, K, H', W', C]``.
Modal-shared blocks (temporal and multi-view spatiotemporal) use one set of
weights for every modality; cross-modal blocks and projection heads own one
set per modality. Each residual sublayer is adaLN-modulated with a gate that
starts at zero, so the whole trunk is the identity at initialisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .conditioning import ConditionSet
from .errors import ConfigError, ShapeError
from .geometry import SpatialQueries
from .nn import (AdaLNModulation, Attention, FeedForward, HashGrid, HashGridParams, Linear, Module,
                 TimestepEmbedder, ada_layer_norm)
from .tensor import Tensor


@dataclass
class MMDiTConfig:
    layers: int = 4  # N modal-shared layers
    alpha1: int = 2  # temporal blocks per spatiotemporal block
    alpha2: int = 2  # modal-shared layers per cross-modal stage
    heads: int = 4
    width: int = 128
    modalities: int = 3
    latent_channels: int = 16
    input_channels: int = 32
    text_dim: int = 64
    num_train_steps: int = 1000
    use_spatiotemporal: bool = True
    use_cross_modal: bool = True
    hash_grid: HashGridParams = field(default_factory=HashGridParams)

    def validate(self) -> None:
        if self.modalities < 1:
            raise ConfigError(f"need at least one modality, got {self.modalities}")
        if not 1 <= self.alpha1 <= self.layers:
            raise ConfigError(f"need 1 <= alpha1 <= N, got alpha1={self.alpha1}, N={self.layers}")
        if not 1 <= self.alpha2 <= self.layers:
            raise ConfigError(f"need 1 <= alpha2 <= N, got alpha2={self.alpha2}, N={self.layers}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MMDiTConfig":
        d = dict(d)
        if isinstance(d.get("hash_grid"), dict):
            d["hash_grid"] = HashGridParams(**d["hash_grid"])
        return cls(**d)


def modulation(piece: Tensor, groups: int, rows: int) -> Tensor:
    """Per-modality vector ``[M, C]`` -> ``[M * groups, rows, C]`` for a token layout."""
    m, c = piece.shape
    return T.broadcast_to(piece.reshape(m, 1, 1, c), (m, groups, rows, c)).reshape(m * groups, rows, c)


def gated(x: Tensor, mods: list[Tensor], fn) -> Tensor:
    """``x + gate * fn(adaLN(x; scale, shift))``."""
    shift, scale, gate = mods
    return x + gate * fn(ada_layer_norm(x, scale, shift))


class TemporalBlock(Module):
    """Per-view attention over ``K·H'·W'`` tokens plus text/camera cross-attention."""

    def __init__(self, width: int, heads: int, text_dim: int, rng: np.random.Generator):
        self.mod = AdaLNModulation(width, width, 9, rng)
        self.attn = Attention(width, heads, rng)
        self.cross = Attention(width, heads, rng, context_dim=text_dim)
        self.ff = FeedForward(width, rng)

    def __call__(self, h: Tensor, context: Tensor, t_emb: Tensor) -> Tensor:
        m, v, k, hh, ww, c = h.shape
        s = k * hh * ww
        x = h.reshape(m * v, s, c)
        mods = [modulation(p, v, s) for p in self.mod.project(t_emb)]
        ctx = T.broadcast_to(context, (m, *context.shape)).reshape(m * v, *context.shape[1:])
        x = gated(x, mods[0:3], self.attn)
        x = gated(x, mods[3:6], lambda y: self.cross(y, ctx))
        x = gated(x, mods[6:9], self.ff)
        return x.reshape(m, v, k, hh, ww, c)


class SpatiotemporalBlock(Module):
    """Hash-grid 3D embedding, cross-view attention per frame, then full attention."""

    def __init__(self, width: int, heads: int, spatial_features: int, rng: np.random.Generator):
        self.mod = AdaLNModulation(width, width, 9, rng)
        self.embed = Linear(spatial_features, width, rng, zero_init=True)
        self.spatial = Attention(width, heads, rng)
        self.full = Attention(width, heads, rng)
        self.ff = FeedForward(width, rng)

    def __call__(self, h: Tensor, cell_feats: Tensor | None, t_emb: Tensor) -> Tensor:
        m, v, k, hh, ww, c = h.shape
        if cell_feats is not None:
            e = self.embed(cell_feats).reshape(1, v, k, hh, ww, c)
            h = h + T.broadcast_to(e, h.shape)
        mods = self.mod.project(t_emb)
        # K x (V·H'·W'): views of the same frame attend to each other
        x = h.permute(0, 2, 1, 3, 4, 5).reshape(m * k, v * hh * ww, c)
        x = gated(x, [modulation(p, k, v * hh * ww) for p in mods[0:3]], self.spatial)
        h = x.reshape(m, k, v, hh, ww, c).permute(0, 2, 1, 3, 4, 5)
        # (V·K·H'·W'): every token of a modality attends to every other
        x = h.reshape(m, v * k * hh * ww, c)
        full = [modulation(p, 1, v * k * hh * ww) for p in mods[3:9]]
        x = gated(x, full[0:3], self.full)
        x = gated(x, full[3:6], self.ff)
        return x.reshape(m, v, k, hh, ww, c)


class CrossModalBlock(Module):
    """Modality-specific block; keys/values of its cross-attention come from the other modalities."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.mod = AdaLNModulation(width, width, 9, rng)
        self.attn = Attention(width, heads, rng)
        self.cross = Attention(width, heads, rng)
        self.ff = FeedForward(width, rng)

    def __call__(self, h_m: Tensor, h_others: list[Tensor], t_emb_m: Tensor) -> Tensor:
        """``h_m [1, S, C]``, each other ``[1, S, C]``, ``t_emb_m [1, D]``."""
        _, s, _ = h_m.shape
        others = T.concat(h_others, axis=1) if h_others else h_m
        mods = self.mod(t_emb_m, s)
        x = gated(h_m, mods[0:3], self.attn)
        x = gated(x, mods[3:6], lambda y: self.cross(y, others))
        return gated(x, mods[6:9], self.ff)


class ProjectionHead(Module):
    """adaLN (zero-initialised modulation) followed by a linear map to latent channels."""

    def __init__(self, width: int, out_channels: int, rng: np.random.Generator):
        self.mod = AdaLNModulation(width, width, 2, rng)
        self.linear = Linear(width, out_channels, rng, gain=0.1)

    def __call__(self, h_m: Tensor, t_emb_m: Tensor) -> Tensor:
        _, s, _ = h_m.shape
        shift, scale = self.mod(t_emb_m, s)
        return self.linear(ada_layer_norm(h_m, scale, shift))


class MMDiT(Module):
    def __init__(self, config: MMDiTConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config.width
        self.time = TimestepEmbedder(c, config.num_train_steps, rng)
        self.patch_in = Linear(config.input_channels, c, rng)
        self.hash_grid = HashGrid(config.hash_grid, rng)
        # heads are built before the trunk so their weights do not depend on N
        self.heads = [ProjectionHead(c, config.latent_channels, rng) for _ in range(config.modalities)]
        self.layers = []
        for _ in range(config.layers):
            temporal = [TemporalBlock(c, config.heads, config.text_dim, rng) for _ in range(config.alpha1)]
            st = SpatiotemporalBlock(c, config.heads, self.hash_grid.out_features, rng)
            self.layers.append([temporal, st])
        stages = config.layers // config.alpha2
        self.cross_modal = [[CrossModalBlock(c, config.heads, rng) for _ in range(config.modalities)]
                            for _ in range(stages)]
        self._trace: list[str] = []

    @property
    def trace(self) -> list[str]:
        """Block sequence executed by the last forward pass (``T``, ``ST``, ``CM``)."""
        return list(self._trace)

    def shared_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if not n.startswith(("cross_modal", "heads"))]

    def cell_features(self, queries: SpatialQueries | None) -> Tensor | None:
        """Hash-grid features averaged per latent cell ``[V·K·H'·W', L·F]``."""
        if queries is None:
            return None
        feats = self.hash_grid(queries.points)
        return T.segment_sum(feats, queries.cell_ids, queries.num_cells, weights=queries.weights)

    def forward(self, z: Tensor, conds: ConditionSet, t) -> Tensor:
        """``z [M, V, K, H', W', C_in]`` and one timestep per modality -> ``eps_hat [M, V, K, H', W', C_lat]``."""
        cfg = self.config
        if z.ndim != 6 or z.shape[0] != cfg.modalities or z.shape[-1] != cfg.input_channels:
            raise ShapeError(f"expected z [{cfg.modalities}, V, K, H', W', {cfg.input_channels}], got {z.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (cfg.modalities,))
        m, v, k, hh, ww, _ = z.shape
        self._trace = []
        t_emb = self.time(t)
        h = self.patch_in(z)
        context = conds.text_context()
        cells = self.cell_features(conds.spatial_queries((hh, ww))) if cfg.use_spatiotemporal else None
        for i, (temporal, st) in enumerate(self.layers):
            for block in temporal:
                h = block(h, context, t_emb)
                self._trace.append("T")
            if cfg.use_spatiotemporal:
                h = st(h, cells, t_emb)
                self._trace.append("ST")
            if cfg.use_cross_modal and (i + 1) % cfg.alpha2 == 0:
                h = self._cross_modal(h, self.cross_modal[(i + 1) // cfg.alpha2 - 1], t_emb)
                self._trace.append("CM")
        flat = h.reshape(m, 1, v * k * hh * ww, cfg.width)
        out = [self.heads[j](flat[j], t_emb[j:j + 1]) for j in range(m)]
        return T.stack(out, axis=0).reshape(m, v, k, hh, ww, cfg.latent_channels)

    __call__ = forward

    def _cross_modal(self, h: Tensor, blocks: list[CrossModalBlock], t_emb: Tensor) -> Tensor:
        m, v, k, hh, ww, c = h.shape
        flat = h.reshape(m, 1, v * k * hh * ww, c)
        rows = [flat[j] for j in range(m)]
        out = [blocks[j](rows[j], rows[:j] + rows[j + 1:], t_emb[j:j + 1]) for j in range(m)]
        return T.stack(out, axis=0).reshape(m, v, k, hh, ww, c)
