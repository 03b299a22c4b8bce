"""Dense row-major tensors with tape-based reverse-mode differentiation.

Every operation records itself on the innermost active :class:`Tape` when at
least one operand requires a gradient. Outside a tape nothing is recorded,
which doubles as the no-grad mode used during sampling and evaluation.

Binary elementwise operations only broadcast over *leading* axes: the smaller
operand's shape must equal a trailing suffix of the larger one (or be a
scalar). Anything else has to go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import threading
from numbers import Number
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of the operations performed inside a ``with`` block.

    Recording order is a valid topological order, so backward traversal is a
    single reverse sweep. A tape is single-use: :meth:`gradient` discards the
    recorded nodes once it has run.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: "Tensor", leaves: Sequence["Tensor"]) -> list[np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf; leaves off the path get zeros."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        leaf_ids = {id(leaf) for leaf in leaves}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.get(key) if key in leaf_ids else grads.pop(key, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pk = id(parent)
                prev = grads.get(pk)
                grads[pk] = pg if prev is None else prev + pg
        self.nodes.clear()
        out = []
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            elif g.shape != leaf.shape:  # pragma: no cover - internal consistency
                raise ShapeError(f"gradient shape {g.shape} != leaf shape {leaf.shape}")
            out.append(np.asarray(g, dtype=leaf.dtype))
        return out


def backward(loss: "Tensor", leaves: Sequence["Tensor"]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``leaves``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return [np.zeros_like(leaf.data) for leaf in leaves]
    tape = _owner_tape(loss)
    return tape.gradient(loss, leaves)


def _owner_tape(t: "Tensor") -> Tape:
    for tape in reversed(_tape_stack()):
        if any(node is t.node for node in reversed(tape.nodes)):
            return tape
    raise ContractError("loss was not recorded on an active tape")


class Tensor:
    """An N-dimensional real array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: add(neg(self), o)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(self, o)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: rdiv(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


class Parameter(Tensor):
    """A learnable leaf. Its ``data`` is replaced by optimizers between steps."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def apply_op(out: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``out`` and record it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    Extension ops outside this module (convolution patches, hash lookups) are
    built on this.
    """
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                t.requires_grad = True
                t.node = Node(t, parents, backward_fn, op)
                tape.nodes.append(t.node)
                break
    return t


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not compatible (leading-axis broadcast only)")


def _binary(a: Tensor, b, op: str, fwd, bwd_a, bwd_b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a)
    if isinstance(b, Number):
        b = float(b)  # numpy scalars would otherwise promote float32 data
        return apply_op(fwd(a.data, b), (a,), lambda g: (bwd_a(g, a.data, b),), op)
    if not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    _check_suffix(a.shape, b.shape, op)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _reduce_to(bwd_a(g, ad, bd), ad.shape) if a.requires_grad else None,
            _reduce_to(bwd_b(g, ad, bd), bd.shape) if b.requires_grad else None,
        )

    return apply_op(fwd(ad, bd), (a, b), back, op)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def div(a, b) -> Tensor:
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.any(bd == 0):
        raise NumericDomainError("division by zero")
    return _binary(
        a, b, "div", np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def rdiv(a: Tensor, c: float) -> Tensor:
    """``c / a`` for a scalar numerator."""
    if np.any(a.data == 0):
        raise NumericDomainError("division by zero")
    out = c / a.data
    return apply_op(out, (a,), lambda g: (-g * out / a.data,), "rdiv")


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("exp overflow")
    return apply_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return apply_op(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def square(a: Tensor) -> Tensor:
    return apply_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = float(np.sqrt(2.0 / np.pi))  # Python float: keeps float32 data float32


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return apply_op(out, (a,), back, "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return apply_op(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),), "silu")


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return apply_op(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return apply_op(ad @ bd, (a, b), back, "matmul")


# -- layout ------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) % max(a.ndim, 1) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"{axes} is not a permutation of the {a.ndim} axes of {a.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return apply_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return permute(a, axes)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return apply_op(out, (a,), lambda g: (_reduce_to(g, a.shape),), "broadcast_to")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    out = np.ascontiguousarray(a.data[idx])

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_op(out, (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat along {axis}: {[x.shape for x in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return apply_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {[t.shape for t in tensors]}")
    axis = axis % (tensors[0].ndim + 1)
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return apply_op(out, tuple(tensors), back, "stack")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one ``(before, after)`` pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad widths {widths} do not match rank of {a.shape}")
    out = np.pad(a.data, widths)
    crop = tuple(slice(b, b + s) for (b, _), s in zip(widths, a.shape))
    return apply_op(out, (a,), lambda g: (g[crop],), "pad")


def take(a: Tensor, index) -> Tensor:
    """Gather rows (axis 0) of ``a``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return apply_op(out, (a,), back, "take")


def segment_sum(a: Tensor, segment_ids, num_segments: int, weights=None) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets, optionally weighted per row."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != a.shape[:1]:
        raise ShapeError(f"segment ids {ids.shape} do not match rows of {a.shape}")
    w = None if weights is None else np.asarray(weights, dtype=a.dtype)
    src = a.data if w is None else a.data * w.reshape((-1,) + (1,) * (a.ndim - 1))
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, ids, src)

    def back(g):
        rows = g[ids]
        if w is not None:
            rows = rows * w.reshape((-1,) + (1,) * (a.ndim - 1))
        return (rows,)

    return apply_op(out, (a,), back, "segment_sum")


# -- normalisation -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (a,), back, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over the last axis (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return apply_op(xhat, (a,), back, "layer_norm")


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def arange(n: int, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.arange(n, dtype=dtype))

