"""Condition encoders and the diffusion model's input assembly.

Three condition families feed the model:

* text/camera: camera parameters through Fourier features and an MLP, caption
  tokens through a frozen seeded table, rows stacked along the sequence axis;
* layout: box, road and occupancy maps, each through its own causal encoder,
  fused by a shared causal resnet block;
* reference: an optional first-frame latent placed in frame slot 0 with a
  presence mask.

Dropout swaps a family for its null embedding, which is how the
unconditional branch of classifier-free guidance is formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .codec import PatchCodec
from .errors import ContractError, ShapeError
from .geometry import SceneGeometry, SpatialQueries
from .nn import MLP, CausalConv3d, CausalResnetBlock, Linear, Module, fourier_embed
from .tensor import Parameter, Tensor
from .text import ScenePrompt, Vocabulary, default_vocabulary
from .toyscene.layout import LayoutMaps

CAMERA_FREQS = 6
TEXT_TABLE_SEED = 1234
FAMILIES = ("text", "layout", "ref")


class TextCameraEncoder(Module):
    """``f_text``: one row per camera followed by one row per caption token."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 table_seed: int = TEXT_TABLE_SEED):
        self.dim = dim
        self.vocab_size = vocab_size
        # frozen stand-in for a pretrained text encoder: never a Parameter
        self._table = np.random.default_rng(table_seed).standard_normal((vocab_size, dim)).astype(T.DEFAULT_DTYPE)
        self.camera_mlp = MLP([16 * 2 * CAMERA_FREQS, dim, dim], rng)

    def __call__(self, prompt: ScenePrompt) -> Tensor:
        prompt.validate(self.vocab_size)
        dtype = self.camera_mlp.layers[0].weight.dtype
        feats = fourier_embed(np.asarray(prompt.camera_params), CAMERA_FREQS).astype(dtype)
        cam_rows = self.camera_mlp(Tensor._wrap(feats))
        if not prompt.caption_tokens:
            return cam_rows
        text_rows = Tensor._wrap(self._table[np.asarray(prompt.caption_tokens)].astype(dtype))
        return T.concat([cam_rows, text_rows], axis=0)


class LayoutBranch(Module):
    """Causal resnet block at full resolution, then three stride-2 causal convs (/8)."""

    def __init__(self, c_out: int, rng: np.random.Generator, c_in: int = 3, stages: int = 3):
        self.block = CausalResnetBlock(c_in, c_out, rng)
        self.down = [CausalConv3d(c_out, c_out, rng, spatial_stride=2) for _ in range(stages)]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.block(x)
        for conv in self.down:
            h = conv(T.gelu(h))
        return h


class UnifiedLayoutEncoder(Module):
    """Per-condition branches fused by a shared causal resnet block."""

    def __init__(self, c_out: int, rng: np.random.Generator, branch_width: int = 8):
        self.c_out = c_out
        self.box = LayoutBranch(branch_width, rng)
        self.road = LayoutBranch(branch_width, rng)
        self.occ = LayoutBranch(branch_width, rng)
        self.shared = CausalResnetBlock(3 * branch_width, c_out, rng)

    def __call__(self, maps: LayoutMaps) -> Tensor:
        box, road, occ = _check_maps(maps)
        dtype = self.shared.conv1.weight.dtype
        parts = [branch(Tensor._wrap(m.astype(dtype)))
                 for branch, m in ((self.box, box), (self.road, road), (self.occ, occ))]
        return self.shared(T.concat(parts, axis=-1))


class CodecLayoutEncoder(Module):
    """Ablation: layout maps through the frozen video codec, then a linear fuse."""

    def __init__(self, c_out: int, rng: np.random.Generator, codec: PatchCodec):
        self.c_out = c_out
        self._codec = codec
        self.fuse = Linear(3 * codec.channels, c_out, rng)

    def __call__(self, maps: LayoutMaps) -> Tensor:
        dtype = self.fuse.weight.dtype
        lat = [self._codec.encode(m).data.astype(dtype) for m in _check_maps(maps)]
        return self.fuse(Tensor._wrap(np.concatenate(lat, axis=-1)))


def _check_maps(maps: LayoutMaps) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arrays = tuple(np.asarray(m) for m in maps.as_tuple())
    if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 5:
        raise ShapeError(f"layout maps disagree in shape: {[a.shape for a in arrays]}")
    return arrays


@dataclass
class ConditionSet:
    """Encoded conditions for one scene plus the null embeddings that replace them."""

    f_text: Tensor  # [V + tokens, C_txt]
    f_layout: Tensor  # [V, K, H', W', C_cond]
    reference: np.ndarray | None  # [M, V, 1, H', W', C_lat]
    occupancy: np.ndarray | None  # [P, 5]
    geometry: SceneGeometry | None
    views: int
    null_text: Tensor  # [1, C_txt]
    null_layout: Tensor  # [C_cond]
    dropped: dict = field(default_factory=lambda: {f: False for f in FAMILIES})

    def text_context(self) -> Tensor:
        """Per-view cross-attention context ``[V, S, C_txt]``: own camera row, then caption rows."""
        v = self.views
        if self.dropped["text"]:
            c = self.null_text.shape[-1]
            return T.broadcast_to(self.null_text.reshape(1, 1, c), (v, 1, c))
        cams = self.f_text[:v].reshape(v, 1, -1)
        words = self.f_text.shape[0] - v
        if not words:
            return cams
        text = self.f_text[v:]
        text = T.broadcast_to(text.reshape(1, words, -1), (v, words, text.shape[-1]))
        return T.concat([cams, text], axis=1)

    def layout_features(self) -> Tensor:
        if self.dropped["layout"]:
            return T.broadcast_to(self.null_layout, self.f_layout.shape)
        return self.f_layout

    def spatial_queries(self, latent_hw: tuple[int, int]) -> SpatialQueries | None:
        """Camera geometry drops with the text family; occupancy with the layout family."""
        if self.geometry is None or self.dropped["text"]:
            return None
        occ = None if self.dropped["layout"] else self.occupancy
        return self.geometry.queries(latent_hw, occ)

    def active_reference(self) -> np.ndarray | None:
        return None if self.dropped["ref"] else self.reference


def draw_dropout(rng: np.random.Generator, p_text: float, p_layout: float,
                 p_ref: float) -> dict:
    """One uniform draw per family, always in the order text, layout, reference."""
    probs = {"text": p_text, "layout": p_layout, "ref": p_ref}
    for name, p in probs.items():
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"dropout probability for {name} must lie in [0, 1], got {p}")
    return {name: bool(rng.random() < p) for name, p in probs.items()}


def conditioning_dropout(conds: ConditionSet, rng: np.random.Generator, p_text: float = 0.1,
                         p_layout: float = 0.1, p_ref: float = 0.5) -> ConditionSet:
    flags = draw_dropout(rng, p_text, p_layout, p_ref)
    return with_dropped(conds, **flags)


def with_dropped(conds: ConditionSet, text: bool = False, layout: bool = False,
                 ref: bool = False) -> ConditionSet:
    """Copy of ``conds`` with the named families (additionally) replaced by nulls."""
    d = conds.dropped
    return replace(conds, dropped={"text": d["text"] or text, "layout": d["layout"] or layout,
                                   "ref": d["ref"] or ref})


def reference_block(reference: np.ndarray | None, like_shape: tuple[int, ...], dtype) -> np.ndarray:
    """Reference latent at frame slot 0, zeros elsewhere, plus a 1-channel presence mask.

    ``like_shape`` is the noisy-latent shape ``[..., V, K, H', W', C_lat]``.
    """
    *lead, v, k, hh, ww, c = like_shape
    block = np.zeros((*lead, v, k, hh, ww, c + 1), dtype=dtype)
    if reference is not None:
        reference = np.asarray(reference)
        if reference.shape != (*lead, v, 1, hh, ww, c):
            raise ShapeError(f"reference {reference.shape} does not match latents {like_shape}")
        block[..., 0, :, :, :c] = reference[..., 0, :, :, :]
        block[..., 0, :, :, c] = 1.0
    return block


def assemble_pre(f_layout: Tensor, reference: np.ndarray | None, x_shape: tuple[int, ...]) -> Tensor:
    """``concat(f_layout, reference block, mask)`` before the 1x1x1 projection."""
    lead = x_shape[:-5]
    if tuple(f_layout.shape[:-1]) != tuple(x_shape[-5:-1]):
        raise ShapeError(f"layout grid {f_layout.shape} does not match latent grid {x_shape}")
    lay = T.broadcast_to(f_layout, (*lead, *f_layout.shape))
    ref = Tensor._wrap(reference_block(reference, x_shape, f_layout.dtype))
    return T.concat([lay, ref], axis=-1)


def assemble_inputs(f_layout: Tensor, reference: np.ndarray | None, x_noisy: Tensor,
                    match: Linear) -> Tensor:
    """``z = concat(E^c(concat(f_layout, ref, mask)), x_noisy)`` along channels."""
    pre = assemble_pre(f_layout, reference, x_noisy.shape)
    return T.concat([match(pre), x_noisy], axis=-1)


class ConditionEncoder(Module):
    """All learnable condition encoders, their null embeddings and ``E^c``."""

    def __init__(self, rng: np.random.Generator, latent_channels: int = 16, text_dim: int = 64,
                 cond_dim: int = 32, match_dim: int | None = None, vocab: Vocabulary | None = None,
                 layout_encoder: str = "unified", codec: PatchCodec | None = None):
        vocab = vocab or default_vocabulary()
        self.latent_channels = latent_channels
        self.text_dim = text_dim
        self.cond_dim = cond_dim
        self.match_dim = latent_channels if match_dim is None else match_dim
        self.text = TextCameraEncoder(len(vocab), text_dim, rng)
        if layout_encoder == "unified":
            self.layout = UnifiedLayoutEncoder(cond_dim, rng)
        elif layout_encoder == "codec":
            self.layout = CodecLayoutEncoder(cond_dim, rng, codec or PatchCodec(channels=latent_channels))
        else:
            raise ContractError(f"unknown layout encoder {layout_encoder!r}")
        self.null_text = Parameter(np.zeros((1, text_dim), dtype=T.DEFAULT_DTYPE))
        self.null_layout = Parameter(np.zeros(cond_dim, dtype=T.DEFAULT_DTYPE))
        self.match = Linear(cond_dim + latent_channels + 1, self.match_dim, rng)

    @property
    def input_channels(self) -> int:
        return self.match_dim + self.latent_channels

    def encode(self, prompt: ScenePrompt, maps: LayoutMaps, reference: np.ndarray | None = None,
               occupancy: np.ndarray | None = None,
               geometry: SceneGeometry | None = None) -> ConditionSet:
        views = np.asarray(prompt.camera_params).shape[0]
        return ConditionSet(self.text(prompt), self.layout(maps), reference, occupancy, geometry,
                            views, self.null_text, self.null_layout)

    def assemble(self, conds: ConditionSet, x_noisy: Tensor) -> Tensor:
        return assemble_inputs(conds.layout_features(), conds.active_reference(), x_noisy, self.match)
