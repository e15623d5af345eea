"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive builds its output through :func:`_record`, which
attaches a node holding the parents and a closure mapping the output gradient
to per-parent gradients. :func:`backward` orders the reachable nodes by their
execution sequence number and walks them in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateMaskError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        elif not isinstance(data, np.ndarray):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- gradient storage -------------------------------------------------
    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    # -- metadata ---------------------------------------------------------
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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Parameter(Tensor):
    """A named trainable tensor. Frozen parameters never receive gradient."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self._grad = None

    @property
    def grad(self) -> np.ndarray:
        return np.zeros_like(self.data) if self._grad is None else self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = Node(parents, backward, op)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a} with {b}") from None


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _record(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- nonlinearities ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _record(np.where(keep, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * keep,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # branch on sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return _record(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log of non-positive input")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    out = np.maximum(x.data, x.dtype.type(lo))
    return _record(out, (x,), lambda g: (g * keep,), "clamp_min")


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record(np.maximum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
                   "maximum")


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _record(np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
                   "minimum")


# -- reductions and shape manipulation ---------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _record(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    n = len(tensors)
    return _record(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading (batch) axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: one flat GEMM each way
        k, n = bd.shape
        flat = ad.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, n)
            return ((g2 @ bd.T).reshape(ad.shape), flat.T @ g2)

        return _record((flat @ bd).reshape(*ad.shape[:-1], n), (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record(ad @ bd, (a, b), backward, "matmul")


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` is True where an entry is excluded."""
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, logits.shape)
        except ValueError:
            raise ShapeError(f"softmax mask {mask.shape} does not fit {logits.shape}") from None
        if full.all(axis=-1).any():
            raise DegenerateMaskError("a softmax row is fully masked")
        logits = np.where(full, -np.inf, logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    n = xd.shape[-1]

    def backward(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, beta.shape))

    return _record((xhat * gd + beta.data).astype(xd.dtype), (x, gamma, beta), backward,
                   "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside vocabulary of size {table.shape[0]}")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _record(table.data[ids], (table,), backward, "embedding")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last convolution. x: (B, H, W, Cin); weight: (k, k, Cin, Cout)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    k, cin, cout = weight.shape[0], weight.shape[2], weight.shape[3]
    b, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")
    offsets = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate(
        [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in offsets],
        axis=-1)
    wmat = weight.data.reshape(k * k * cin, cout)
    flat = cols.reshape(-1, k * k * cin)
    out = (flat @ wmat).reshape(b, ho, wo, cout) + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = flat.T @ g2
        if not x.requires_grad:  # e.g. the raw image
            return (None, gw.reshape(weight.shape), _unbroadcast(g, bias.shape))
        gcols = (g2 @ wmat.T).reshape(b, ho, wo, k * k * cin)
        gxp = np.zeros_like(xp)
        for n, (i, j) in enumerate(offsets):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                gcols[..., n * cin:(n + 1) * cin]
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        return (gx, gw.reshape(weight.shape), _unbroadcast(g, bias.shape))

    return _record(out, (x, weight, bias), backward, "conv2d")


# -- reverse pass ---------------------------------------------------------------

class Tape:
    """Operations reachable from an output, in execution order."""

    def __init__(self, nodes: list[tuple[Node, Tensor]]):
        self.entries = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[tuple[Node, Tensor]] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append((node, t))
            stack.extend(node.parents)
        found.sort(key=lambda e: e[0].seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [node.op for node, _ in self.entries]


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad`` between steps.
    Returns the tape that was traversed.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._node is None and loss.requires_grad:
        _accumulate_leaf(loss, grads[id(loss)])
    for node, out in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                _accumulate_leaf(parent, pg)
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    return tape


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    _check_finite(g, "backward")
    t._grad = g.copy() if t._grad is None else t._grad + g


# -- finite-difference oracle -----------------------------------------------------

def grad_check(f: Callable, x, h: float = 1e-5) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors; ``f(x)`` must return a scalar tensor.
    Inputs should be 64-bit. The error of one element is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    targets = [x] if isinstance(x, Tensor) else list(x)
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()
    backward(f(x))
    analytic = [t.grad.copy() for t in targets]
    worst = 0.0
    with no_grad():
        for t, ga in zip(targets, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f(x).data.reshape(-1)[0])
                flat[i] = orig - h
                down = float(f(x).data.reshape(-1)[0])
                flat[i] = orig
                num = (up - down) / (2 * h)
                err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
                worst = max(worst, float(err))
    return worst


def parameters_to_float64(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t._grad = None
