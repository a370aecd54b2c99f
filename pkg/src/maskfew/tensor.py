"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive runs its forward on numpy arrays and, while recording
is enabled, appends a node to the active tape.  ``backward`` replays
the tape in reverse (execution order is already topological), so each
node is visited exactly once per call and repeated calls accumulate
into ``.grad``.

Matrix products go through BLAS; the elementwise/reduction kernels
(gelu, softmax, layer_norm) go through the backend selected in
``maskfew.backend``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from maskfew import backend
from maskfew.errors import ContractError, NumericError, ShapeError


class Tensor:
    """N-d float64 array plus gradient slot.

    ``requires_grad`` marks leaves whose gradient the caller wants; op
    outputs inherit it from their inputs.  ``grad`` stays None until a
    backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Execution-ordered record of differentiable primitives."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_tape = Tape()
_recording = True


def active_tape() -> Tape:
    return _tape


def clear_tape():
    _tape.clear()


@contextlib.contextmanager
def no_grad():
    """Disable recording; forwards run but build no graph."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


@contextlib.contextmanager
def fresh_tape():
    """Run a step on a private tape and drop it afterwards."""
    global _tape
    prev = _tape
    _tape = Tape()
    try:
        yield _tape
    finally:
        _tape = prev


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable):
    if _recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.nodes.append(_Node(out, inputs, bwd))


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires_grad tensor reachable from loss.

    Repeated calls without ``zero_grads`` add another full gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not _tape.nodes:
        raise ContractError("backward called with an empty tape")
    adjoint = {id(loss): np.ones_like(loss.data)}
    owner = {id(loss): loss}
    for node in reversed(_tape.nodes):
        g = adjoint.pop(id(node.out), None)
        owner.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.requires_grad:
            node.out.grad = g if node.out.grad is None else node.out.grad + g
        grads = node.bwd(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
                owner[key] = inp
    # leaves (never an op output) keep their accumulated adjoints
    for key, g in adjoint.items():
        t = owner[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                    _unbroadcast(g, b.data.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                    _unbroadcast(-g, b.data.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                    _unbroadcast(g * a.data, b.data.shape)))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                    _unbroadcast(-g * a.data / (b.data * b.data),
                                                 b.data.shape)))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    _record(out, (a,), lambda g: (g * s,))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    _record(out, (a,), lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")
    out = Tensor(np.log(a.data))
    _record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of a negative value")
    y = np.sqrt(a.data)
    out = Tensor(y)
    _record(out, (a,), lambda g: (g * 0.5 / y,))
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(backend.impl.gelu_fwd(x))
    _record(out, (a,), lambda g: (backend.impl.gelu_bwd(x, g),))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    _record(out, (a,), bwd)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    _record(out, (a,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(a.data.shape),))
    return out


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.swapaxes(i, j)))
    _record(out, (a,), lambda g: (g.swapaxes(i, j),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def tslice(a: Tensor, key) -> Tensor:
    """Basic slicing (ints/slices); gradient scatters into a zero array."""
    out = Tensor(a.data[key])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    _record(out, (a,), bwd)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack of an empty sequence")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    _record(out, tuple(tensors), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim and bd.ndim != 2:
        raise ShapeError(f"matmul batch ranks disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == bd.ndim and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch extents disagree: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    _record(out, (a, b), bwd)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    nd = a.data.ndim
    ax = axis if axis >= 0 else nd + axis
    if not 0 <= ax < nd:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    moved = np.ascontiguousarray(np.moveaxis(a.data, ax, -1))
    flat = moved.reshape(-1, moved.shape[-1])
    y_flat = backend.impl.softmax_fwd(flat)
    y = np.moveaxis(y_flat.reshape(moved.shape), -1, ax)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        g_moved = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(flat.shape)
        gx = backend.impl.softmax_bwd(y_flat, g_moved)
        return (np.ascontiguousarray(np.moveaxis(gx.reshape(moved.shape), -1, ax)),)

    _record(out, (a,), bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature extent {d}")
    if eps <= 0.0:
        raise ContractError("layer_norm eps must be positive")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mu, rstd = backend.impl.layernorm_fwd(flat, gain.data, bias.data, eps)
    out = Tensor(y.reshape(x.data.shape))

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = backend.impl.layernorm_bwd(flat, gain.data, mu, rstd, gflat)
        return (gx.reshape(x.data.shape), ggain, gbias)

    _record(out, (x, gain, bias), bwd)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), bwd)
    return out


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two 1-d vectors, differentiable through both."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity needs matching vectors, got {a.data.shape} and {b.data.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity of a zero-norm vector is undefined")
    a2 = reshape(a, (1, -1))
    b2 = reshape(b, (-1, 1))
    dot = reshape(matmul(a2, b2), ())
    denom = sqrt(mul(sum(mul(a, a)), sum(mul(b, b))))
    return div(dot, denom)
