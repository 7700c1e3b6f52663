"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable primitive lives in ``OPS`` as a pair of numpy
functions: ``forward(datas, **attrs) -> (out, ctx)`` and
``backward(grad_out, ctx, datas, **attrs) -> tuple of input grads``.
``apply`` runs the forward half and, when any input requires a gradient,
appends a record to the active :class:`Tape`.  ``backward`` walks that tape
in reverse.

Leaf gradients are *assigned* (not accumulated across calls), so a fresh
forward+backward always leaves ``.grad`` equal to the gradient of that loss.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class DimensionError(ValueError):
    """Input shapes do not conform to an op's contract."""


class ContractError(RuntimeError):
    """A documented precondition of the engine was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all routes go through apply()
    def __add__(self, other):
        return apply("add", self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", self, _lift(other, self))

    def __rsub__(self, other):
        return apply("sub", _lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, factor=float(other))
        return apply("mul", self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return apply("scale", self, factor=-1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, factor=1.0 / float(other))
        raise TypeError("tensor division only by python scalars")

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        return apply("transpose", self, axes=tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


# --------------------------------------------------------------------------
# tape


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: Any
    attrs: dict


@dataclass
class Tape:
    """Ordered log of differentiable operations, topological by construction."""

    records: list[Record] = field(default_factory=list)

    def record(self, rec: Record) -> None:
        self.records.append(rec)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _local().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local().tapes.pop()


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tapes = [Tape()]


_STATE = _State()


def _local() -> _State:
    return _STATE


def active_tape() -> Tape:
    return _STATE.tapes[-1]


def is_grad_enabled() -> bool:
    return _STATE.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


# --------------------------------------------------------------------------
# op registry


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def register(kind: str):
    def wrap(cls):
        OPS[kind] = OpDef(cls.forward, cls.backward)
        return cls

    return wrap


def apply(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    try:
        op = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
    datas = [t.data for t in inputs]
    out_data, ctx = op.forward(datas, **attrs)
    needs = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        active_tape().record(Record(kind, tuple(inputs), out, ctx, attrs))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf recorded on the active tape."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractError("loss was not produced on the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = OPS[rec.kind].backward(g, rec.ctx, [t.data for t in rec.inputs], **rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    tape.clear()


# --------------------------------------------------------------------------
# helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# ops


@register("matmul")
class _MatMul:
    @staticmethod
    def forward(datas, **_):
        a, b = datas
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, ctx, datas, **_):
        a, b = datas
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@register("add")
class _Add:
    @staticmethod
    def forward(datas, **_):
        a, b = datas
        _check_broadcast("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, ctx, datas, **_):
        a, b = datas
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@register("sub")
class _Sub:
    @staticmethod
    def forward(datas, **_):
        a, b = datas
        _check_broadcast("sub", a, b)
        return a - b, None

    @staticmethod
    def backward(g, ctx, datas, **_):
        a, b = datas
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@register("mul")
class _Mul:
    @staticmethod
    def forward(datas, **_):
        a, b = datas
        _check_broadcast("mul", a, b)
        return a * b, None

    @staticmethod
    def backward(g, ctx, datas, **_):
        a, b = datas
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("scale")
class _Scale:
    @staticmethod
    def forward(datas, factor):
        (a,) = datas
        return a * a.dtype.type(factor), None

    @staticmethod
    def backward(g, ctx, datas, factor):
        return (g * g.dtype.type(factor),)


@register("concat")
class _Concat:
    @staticmethod
    def forward(datas, axis=-1):
        ndim = datas[0].ndim
        ax = axis % ndim
        lead = {d.shape[:ax] + d.shape[ax + 1 :] for d in datas}
        if len(lead) != 1 or any(d.ndim != ndim for d in datas):
            raise DimensionError(f"concat: non-concat dims differ among {[d.shape for d in datas]}")
        sizes = [d.shape[axis] for d in datas]
        return np.concatenate(datas, axis=axis), sizes

    @staticmethod
    def backward(g, sizes, datas, axis=-1):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


@register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(datas, **_):
        out = _stable_sigmoid(datas[0])
        return out, out

    @staticmethod
    def backward(g, out, datas, **_):
        return (g * out * (1.0 - out),)


@register("tanh")
class _Tanh:
    @staticmethod
    def forward(datas, **_):
        out = np.tanh(datas[0])
        return out, out

    @staticmethod
    def backward(g, out, datas, **_):
        return (g * (1.0 - out * out),)


@register("relu")
class _Relu:
    @staticmethod
    def forward(datas, **_):
        x = datas[0]
        return np.maximum(x, 0.0).astype(x.dtype, copy=False), None

    @staticmethod
    def backward(g, ctx, datas, **_):
        return (g * (datas[0] > 0),)


@register("exp")
class _Exp:
    @staticmethod
    def forward(datas, **_):
        out = np.exp(datas[0])
        return out, out

    @staticmethod
    def backward(g, out, datas, **_):
        return (g * out,)


@register("log")
class _Log:
    @staticmethod
    def forward(datas, **_):
        return np.log(datas[0]), None

    @staticmethod
    def backward(g, ctx, datas, **_):
        return (g / datas[0],)


@register("softplus")
class _Softplus:
    @staticmethod
    def forward(datas, **_):
        x = datas[0]
        return np.logaddexp(0.0, x).astype(x.dtype, copy=False), None

    @staticmethod
    def backward(g, ctx, datas, **_):
        return (g * _stable_sigmoid(datas[0]),)


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(datas, **_):
        x = datas[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        out = e / e.sum(axis=-1, keepdims=True)
        return out, out

    @staticmethod
    def backward(g, out, datas, **_):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


@register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(datas, **_):
        x = datas[0]
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return out, out

    @staticmethod
    def backward(g, out, datas, **_):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


@register("layer_norm")
class _LayerNorm:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""

    @staticmethod
    def forward(datas, eps=1e-5):
        x = datas[0]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out = xc * inv
        return out, (out, inv)

    @staticmethod
    def backward(g, ctx, datas, eps=1e-5):
        out, inv = ctx
        gm = g.mean(axis=-1, keepdims=True)
        gom = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gom),)


@register("embedding")
class _Embedding:
    @staticmethod
    def forward(datas, ids):
        (table,) = datas
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
        return table[ids], None

    @staticmethod
    def backward(g, ctx, datas, ids):
        (table,) = datas
        out = np.zeros_like(table)
        np.add.at(out, np.asarray(ids).reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)


@register("take")
class _Take:
    """Pick one entry per row along the last axis: out[..., ] = x[..., idx[...]]."""

    @staticmethod
    def forward(datas, index):
        (x,) = datas
        index = np.asarray(index)
        if index.shape != x.shape[:-1]:
            raise DimensionError(f"take: index shape {index.shape} vs data {x.shape}")
        if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
            raise IndexError(f"take: index outside [0, {x.shape[-1]})")
        return np.take_along_axis(x, index[..., None], axis=-1)[..., 0], None

    @staticmethod
    def backward(g, ctx, datas, index):
        (x,) = datas
        out = np.zeros_like(x)
        np.put_along_axis(out, np.asarray(index)[..., None], g[..., None], axis=-1)
        return (out,)


@register("index_scatter_add")
class _IndexScatterAdd:
    """out = base; out[..., index[k]] += src[..., k].  ``index`` must be injective."""

    @staticmethod
    def forward(datas, index):
        base, src = datas
        index = np.asarray(index)
        if src.shape[-1] != index.shape[0]:
            raise DimensionError(f"index_scatter_add: src {src.shape} vs index of length {index.shape[0]}")
        if index.size and (index.min() < 0 or index.max() >= base.shape[-1]):
            raise IndexError(f"index_scatter_add: index outside [0, {base.shape[-1]})")
        _check_broadcast("index_scatter_add", base[..., : index.shape[0]], src)
        out_shape = np.broadcast_shapes(base.shape[:-1], src.shape[:-1]) + base.shape[-1:]
        out = np.array(np.broadcast_to(base, out_shape))
        out[..., index] += src
        return out, None

    @staticmethod
    def backward(g, ctx, datas, index):
        base, src = datas
        return _unbroadcast(g, base.shape), _unbroadcast(g[..., np.asarray(index)], src.shape)


@register("mask_fill")
class _MaskFill:
    @staticmethod
    def forward(datas, mask, value):
        (x,) = datas
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise DimensionError(f"mask_fill: mask {mask.shape} vs data {x.shape}") from None
        return np.where(mask, x.dtype.type(value), x), None

    @staticmethod
    def backward(g, ctx, datas, mask, value):
        return (_unbroadcast(np.where(mask, 0.0, g).astype(g.dtype, copy=False), datas[0].shape),)


@register("sum")
class _Sum:
    @staticmethod
    def forward(datas, axis=None, keepdims=False):
        return np.asarray(datas[0].sum(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, ctx, datas, axis=None, keepdims=False):
        x = datas[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)


@register("mean")
class _Mean:
    @staticmethod
    def forward(datas, axis=None, keepdims=False):
        x = datas[0]
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, ctx, datas, axis=None, keepdims=False):
        x = datas[0]
        n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)


@register("dropout")
class _Dropout:
    """Inverted dropout; ``seed`` fixes the mask so a call is reproducible."""

    @staticmethod
    def forward(datas, rate, seed, training=True):
        (x,) = datas
        if not training or rate == 0.0:
            return x.copy(), None
        keep = np.random.default_rng(seed).random(x.shape) >= rate
        scale = x.dtype.type(1.0 / (1.0 - rate))
        mask = keep.astype(x.dtype) * scale
        return x * mask, mask

    @staticmethod
    def backward(g, mask, datas, **_):
        return (g if mask is None else g * mask,)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(datas, shape):
        x = datas[0]
        try:
            return x.reshape(shape), None
        except ValueError:
            raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    @staticmethod
    def backward(g, ctx, datas, **_):
        return (g.reshape(datas[0].shape),)


@register("transpose")
class _Transpose:
    @staticmethod
    def forward(datas, axes):
        return np.transpose(datas[0], axes), None

    @staticmethod
    def backward(g, ctx, datas, axes):
        return (np.transpose(g, np.argsort(axes)),)


# --------------------------------------------------------------------------
# functional front-end


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", a, b)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return apply("tanh", x)


def relu(x: Tensor) -> Tensor:
    return apply("relu", x)


def exp(x: Tensor) -> Tensor:
    return apply("exp", x)


def log(x: Tensor) -> Tensor:
    return apply("log", x)


def softplus(x: Tensor) -> Tensor:
    return apply("softplus", x)


def softmax(x: Tensor) -> Tensor:
    return apply("softmax", x)


def log_softmax(x: Tensor) -> Tensor:
    return apply("log_softmax", x)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, eps=eps)


def embedding(table: Tensor, ids) -> Tensor:
    return apply("embedding", table, ids=np.asarray(ids))


def take(x: Tensor, index) -> Tensor:
    return apply("take", x, index=np.asarray(index))


def index_scatter_add(base: Tensor, src: Tensor, index) -> Tensor:
    return apply("index_scatter_add", base, src, index=np.asarray(index))


def mask_fill(x: Tensor, mask, value: float) -> Tensor:
    return apply("mask_fill", x, mask=np.asarray(mask, dtype=bool), value=value)


def dropout(x: Tensor, rate: float, seed: int, training: bool = True) -> Tensor:
    return apply("dropout", x, rate=rate, seed=seed, training=training)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return apply("sum", x, axis=axis, keepdims=keepdims)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)
