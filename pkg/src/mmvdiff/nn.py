"""Neural building blocks: modules, adaptive layer norm, attention, causal
convolutions, Fourier features and the multi-resolution hash grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor
from .validation import check_scalar_fields


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes in definition
    order, recursing into sub-modules and lists/tuples of sub-modules. A
    parameter reachable through several paths is reported once, under the
    first name found.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._named(prefix, seen)

    def _named(self, prefix: str, seen: set[int]):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            yield from _walk(value, name, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (64-bit mode for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for mod in self.modules():
            for key, value in vars(mod).items():
                if isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
                    setattr(mod, key, value.astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in vars(self).items():
            if not key.startswith("_"):
                yield from _submodules(value)

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else T.DEFAULT_DTYPE


def _submodules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _submodules(item)


def _walk(value, name: str, seen: set[int]):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        yield from value._named(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", seen)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(T.DEFAULT_DTYPE)


class Linear(Module):
    """``y = x @ W + b`` over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, gain: float = 1.0):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((in_features, out_features), dtype=T.DEFAULT_DTYPE)
        else:
            w = xavier(rng, in_features, out_features, gain)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=T.DEFAULT_DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects {self.in_features} input channels, got {x.shape}")
        if x.ndim == 1:
            y = T.matmul(x.reshape(1, -1), self.weight).reshape(self.out_features)
        else:
            y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


# -- adaptive normalisation ---------------------------------------------------


def ada_layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """``layer_norm(x) * (1 + scale) + shift`` with the channel on the last axis.

    ``scale``/``shift`` are either ``[C]`` or already expanded to a shape that
    is a trailing suffix of ``x.shape``.
    """
    c = x.shape[-1]
    if scale.shape[-1] != c or shift.shape[-1] != c:
        raise ShapeError(f"modulation width {scale.shape}/{shift.shape} != channels of {x.shape}")
    return T.layer_norm(x, eps) * (scale + 1.0) + shift


def expand_rows(v: Tensor, rows: int) -> Tensor:
    """``[B, C] -> [B, rows, C]`` so per-sample modulation lines up with tokens."""
    b, c = v.shape
    return T.broadcast_to(v.reshape(b, 1, c), (b, rows, c))


class AdaLNModulation(Module):
    """Projects the timestep embedding to ``chunks`` vectors of width C.

    The whole projection starts at zero, so every gate is exactly zero at
    initialisation and every scale/shift is neutral.
    """

    def __init__(self, cond_dim: int, width: int, chunks: int, rng: np.random.Generator):
        self.width = width
        self.chunks = chunks
        self.proj = Linear(cond_dim, width * chunks, rng, zero_init=True)

    def project(self, t_emb: Tensor) -> list[Tensor]:
        """``t_emb [B, D]`` -> ``chunks`` tensors of shape ``[B, C]``."""
        mod = self.proj(T.gelu(t_emb))
        return [mod[:, i * self.width:(i + 1) * self.width] for i in range(self.chunks)]

    def __call__(self, t_emb: Tensor, rows: int) -> list[Tensor]:
        """``t_emb [B, D]`` -> ``chunks`` tensors of shape ``[B, rows, C]``."""
        return [expand_rows(piece, rows) for piece in self.project(t_emb)]


# -- attention -----------------------------------------------------------------


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         out_proj: Linear | None = None,
                         extra_kv: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Scaled dot-product attention over already-projected ``q, k, v``.

    Shapes are ``[B, S, C]`` for the query and ``[B, S', C]`` for keys and
    values; ``extra_kv`` is appended to ``k, v`` along the sequence axis.
    """
    b, s, c = q.shape
    if c % heads:
        raise ConfigError(f"channel width {c} is not divisible by {heads} heads")
    if extra_kv is not None:
        k = T.concat([k, extra_kv[0]], axis=1)
        v = T.concat([v, extra_kv[1]], axis=1)
    if k.shape[0] != b or k.shape[2] != c or v.shape != k.shape:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    d = c // heads
    sk = k.shape[1]
    qh = q.reshape(b, s, heads, d).permute(0, 2, 1, 3)
    kh = k.reshape(b, sk, heads, d).permute(0, 2, 3, 1)
    vh = v.reshape(b, sk, heads, d).permute(0, 2, 1, 3)
    weights = T.softmax(T.matmul(qh, kh) * (1.0 / np.sqrt(d)), axis=-1)
    out = T.matmul(weights, vh).permute(0, 2, 1, 3).reshape(b, s, c)
    return out_proj(out) if out_proj is not None else out


class Attention(Module):
    """Multi-head self- or cross-attention with learned projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 context_dim: int | None = None):
        if dim % heads:
            raise ConfigError(f"channel width {dim} is not divisible by {heads} heads")
        context_dim = dim if context_dim is None else context_dim
        self.heads = heads
        self.to_q = Linear(dim, dim, rng, bias=False)
        self.to_k = Linear(context_dim, dim, rng, bias=False)
        self.to_v = Linear(context_dim, dim, rng, bias=False)
        self.to_out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        return multi_head_attention(
            self.to_q(x), self.to_k(context), self.to_v(context), self.heads, self.to_out
        )


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 4):
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


# -- causal convolutions ---------------------------------------------------------


def _unfold3d(x: Tensor, stride: tuple[int, int]) -> Tensor:
    """3x3x3 patches of a pre-padded ``[N, K+2, H+2, W+2, C]`` tensor.

    Returns ``[N, K, Ho, Wo, 27*C]`` ordered (dt, dy, dx, c).
    """
    n, kp, hp, wp, c = x.shape
    sh, sw = stride
    k = kp - 2
    ho = (hp - 3) // sh + 1
    wo = (wp - 3) // sw + 1
    xd = x.data
    offsets = [(dt, dy, dx) for dt in range(3) for dy in range(3) for dx in range(3)]
    views = [
        xd[:, dt:dt + k, dy:dy + sh * (ho - 1) + 1:sh, dx:dx + sw * (wo - 1) + 1:sw]
        for dt, dy, dx in offsets
    ]
    out = np.stack(views, axis=4).reshape(n, k, ho, wo, 27 * c)

    def back(g):
        g = g.reshape(n, k, ho, wo, 27, c)
        full = np.zeros(x.shape, dtype=g.dtype)
        for i, (dt, dy, dx) in enumerate(offsets):
            full[:, dt:dt + k, dy:dy + sh * (ho - 1) + 1:sh, dx:dx + sw * (wo - 1) + 1:sw] += g[:, :, :, :, i]
        return (full,)

    return T.apply_op(out, (x,), back, "unfold3d")


class CausalConv3d(Module):
    """3x3x3 convolution over ``[N, K, H, W, C]`` that never looks ahead in time.

    Time is zero-padded with two frames in front and none behind; space is
    padded by one on each side. Spatial stride may be 1 or 2.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, spatial_stride: int = 1):
        self.c_in = c_in
        self.c_out = c_out
        self.stride = spatial_stride
        self.weight = Parameter(xavier(rng, 27 * c_in, c_out))
        self.bias = Parameter(np.zeros(c_out, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[-1] != self.c_in:
            raise ShapeError(f"CausalConv3d expects [N, K, H, W, {self.c_in}], got {x.shape}")
        if x.shape[1] < 1:
            raise ShapeError("causal convolution needs at least one frame")
        xp = T.pad(x, [(0, 0), (2, 0), (1, 1), (1, 1), (0, 0)])
        cols = _unfold3d(xp, (self.stride, self.stride))
        return T.matmul(cols, self.weight) + self.bias

    def set_delta(self) -> None:
        """Identity kernel: the current-frame, centre-pixel tap maps c -> c."""
        w = np.zeros((3, 3, 3, self.c_in, self.c_out), dtype=self.weight.dtype)
        for c in range(min(self.c_in, self.c_out)):
            w[2, 1, 1, c, c] = 1.0
        self.weight.data = w.reshape(27 * self.c_in, self.c_out)
        self.bias.data = np.zeros_like(self.bias.data)


class CausalResnetBlock(Module):
    """``conv -> GELU -> conv`` plus a skip path (1x1x1 when widths differ)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = CausalConv3d(c_in, c_out, rng)
        self.conv2 = CausalConv3d(c_out, c_out, rng)
        self.skip = Linear(c_in, c_out, rng, bias=False) if c_in != c_out else None
        self.use_skip = True

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(T.gelu(self.conv1(x)))
        if not self.use_skip:
            return h
        return h + (self.skip(x) if self.skip is not None else x)


# -- embeddings -------------------------------------------------------------------


def fourier_embed(p, num_freqs: int) -> np.ndarray:
    """``sin/cos(2^l * pi * p)`` for ``l < num_freqs``, interleaved per scalar.

    ``p [..., D] -> [..., D * 2 * num_freqs]``.
    """
    if num_freqs < 1:
        raise ConfigError("Fourier embedding needs at least one frequency")
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ang = p[..., None] * freqs  # [..., D, L]
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # [..., D, L, 2]
    return out.reshape(p.shape[:-1] + (p.shape[-1] * 2 * num_freqs,))


class TimestepEmbedder(Module):
    """Fourier features of ``t / T`` followed by a two-layer MLP."""

    def __init__(self, dim: int, num_train_steps: int, rng: np.random.Generator, num_freqs: int = 10):
        self.num_freqs = num_freqs
        self.num_train_steps = num_train_steps
        self.mlp = MLP([2 * num_freqs, dim, dim], rng)

    def __call__(self, t: Sequence[int]) -> Tensor:
        frac = np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.num_train_steps
        feats = fourier_embed(frac, self.num_freqs).astype(self.mlp.layers[0].weight.dtype)
        return self.mlp(Tensor._wrap(feats))


# -- hash grid --------------------------------------------------------------------

HASH_PRIMES = (1, 2654435761, 805459861)


def hash_index(ijk: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer lattice corners ``[..., 3] -> [...]``."""
    ijk = np.asarray(ijk, dtype=np.uint64)
    h = ijk[..., 0] * np.uint64(HASH_PRIMES[0])
    h ^= ijk[..., 1] * np.uint64(HASH_PRIMES[1])
    h ^= ijk[..., 2] * np.uint64(HASH_PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


@dataclass
class HashGridParams:
    levels: int = 4
    min_resolution: int = 4
    max_resolution: int = 32
    table_size: int = 2**14
    features: int = 2

    def __post_init__(self):
        check_scalar_fields(self)
        if self.table_size & (self.table_size - 1):
            raise ConfigError(f"hash table size must be a power of two, got {self.table_size}")
        if self.levels > 1 and self.max_resolution <= self.min_resolution:
            raise ConfigError("hash grid resolutions must strictly increase")

    @property
    def resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.min_resolution]
        growth = (self.max_resolution / self.min_resolution) ** (1.0 / (self.levels - 1))
        res = [int(round(self.min_resolution * growth**l)) for l in range(self.levels)]
        if any(b <= a for a, b in zip(res[:-1], res[1:])):
            raise ConfigError(f"hash grid resolutions {res} are not strictly increasing")
        return res


def hash_grid_lookup(xyz: np.ndarray, params: HashGridParams) -> tuple[np.ndarray, np.ndarray]:
    """Corner table indices and trilinear weights, each ``[P, L, 8]``."""
    xyz = np.clip(np.asarray(xyz, dtype=np.float64), 0.0, 1.0)
    idx, wts = [], []
    for res in params.resolutions:
        pos = xyz * res
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        corners = base[:, None, :] + _CORNERS[None]  # [P, 8, 3]
        w = np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(-1)
        idx.append(hash_index(corners, params.table_size))
        wts.append(w)
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def hash_grid_encode(xyz, tables: Tensor, params: HashGridParams) -> Tensor:
    """Multi-resolution hash encoding ``[P, 3] in [0,1]^3 -> [P, L*F]``."""
    idx, w = hash_grid_lookup(xyz, params)
    tab = tables.data
    w = w.astype(tab.dtype)
    levels = np.arange(params.levels)[None, :, None]
    corner_feats = tab[levels, idx]  # [P, L, 8, F]
    out = (corner_feats * w[..., None]).sum(axis=2)
    p = out.shape[0]

    def back(g):
        g = g.reshape(p, params.levels, 1, params.features) * w[..., None]
        full = np.zeros_like(tab)
        np.add.at(full, (np.broadcast_to(levels, idx.shape), idx), g)
        return (full,)

    return T.apply_op(out.reshape(p, -1), (tables,), back, "hash_grid")


class HashGrid(Module):
    def __init__(self, params: HashGridParams, rng: np.random.Generator, init_scale: float = 1e-4):
        self.config = params
        self.tables = Parameter(
            rng.uniform(-init_scale, init_scale,
                        size=(params.levels, params.table_size, params.features)).astype(T.DEFAULT_DTYPE)
        )

    @property
    def out_features(self) -> int:
        return self.config.levels * self.config.features

    def __call__(self, xyz) -> Tensor:
        return hash_grid_encode(xyz, self.tables, self.config)
