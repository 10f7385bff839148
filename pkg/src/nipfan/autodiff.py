"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation on a :class:`Tensor` that involves a gradient-tracking input
records a node (its parents and a closure computing the vector-Jacobian
product).  Nodes carry a monotonically increasing sequence number, so the
insertion order of a graph is recoverable from the output alone and
:func:`backward` can visit the nodes in reverse insertion order.

Image tensors are channels-last: ``[h, w, c]`` or batched ``[n, h, w, c]``.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Graph", "ShapeError", "ContractError", "InputError",
    "tensor", "as_tensor", "default_dtype", "set_default_dtype", "precision", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sin", "cos", "sqrt",
    "sigmoid", "tanh", "leaky_relu", "clamp", "where", "maximum_channel",
    "sum", "mean", "reshape", "transpose", "concat", "take", "pad",
    "matmul", "conv2d", "space_to_depth", "depth_to_space", "max_pool2d",
    "global_avg_pool", "softmax", "softmax_cross_entropy", "backward", "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


class InputError(ValueError):
    """An argument value is outside the accepted domain."""


_state = threading.local()
_seq = itertools.count()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InputError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (use float64 for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """Dense array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp", "_seq", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        if 0 in arr.shape:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._vjp = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return _getitem(self, index)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else (axes or None))

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1)
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """``x`` for ``x >= 0`` else ``slope * x``; the derivative at 0 is 1."""
    if not 0 < slope < 1:
        raise InputError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = as_tensor(a)
    positive = a.data >= 0
    out = np.where(positive, a.data, a.data * a.data.dtype.type(slope))
    return _node(out, (a,), lambda g: (np.where(positive, g, g * g.dtype.type(slope)),), "leaky_relu")


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is identity on the closed interval, zero outside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(cond, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "where")


def maximum_channel(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Max over one axis; ties route the gradient to the first index."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g if keepdims else np.expand_dims(g, axis), axis)
        return (ga,)

    return _node(out if keepdims else np.squeeze(out, axis), (a,), vjp, "max_channel")


# ---------------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, index, g)
        else:
            ga[index] = g
        return (ga,)

    return _node(np.array(out, copy=True), (a,), vjp, "getitem")


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        ga = np.zeros((a.shape[axis],) + moved.shape[1:], dtype=g.dtype)
        np.add.at(ga, indices, moved)
        return (np.moveaxis(ga, 0, axis),)

    return _node(out, (a,), vjp, "take")


def _pad_indices(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if mode == "edge":
        return np.clip(idx, 0, n - 1)
    if mode == "symmetric":
        period = 2 * n
        idx = np.mod(idx, period)
        return np.where(idx >= n, period - 1 - idx, idx)
    raise InputError(f"unknown pad mode {mode!r}")


def pad(a, widths: Sequence[tuple], mode: str = "constant") -> Tensor:
    """Pad with zeros (``constant``), replicated edges (``edge``) or mirrored edges (``symmetric``).

    ``widths`` lists ``(before, after)`` for each axis, like ``np.pad``.
    """
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad widths {widths} do not match rank {a.ndim}")
    if mode == "constant":
        out = np.pad(a.data, widths)
        slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
        return _node(out, (a,), lambda g: (g[slices],), "pad")
    out = a
    for axis, (before, after) in enumerate(widths):
        if before or after:
            out = take(out, _pad_indices(a.shape[axis], before, after, mode), axis)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def _same_pads(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x[..., h, w, cin]`` with ``kernel[kh, kw, cin, cout]``.

    ``same`` padding uses zeros and yields ``ceil(h / stride)`` rows;
    ``valid`` yields ``(h - kh) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be [kh, kw, cin, cout], got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    if x.ndim not in (3, 4) or x.shape[-1] != cin:
        raise ShapeError(f"input {x.shape} does not match kernel {kernel.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, h, w, _ = xd.shape
    if padding == "same":
        ph, pw = _same_pads(h, kh, stride), _same_pads(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"input {x.shape} smaller than kernel {kernel.shape} with valid padding")
        ph = pw = (0, 0)
    else:
        raise InputError(f"unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), ph, pw, (0, 0))) if (ph != (0, 0) or pw != (0, 0)) else xd
    hp, wp = xp.shape[1:3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out += bias.data
        parents.append(bias)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gmat = g4.reshape(-1, cout)
        gx = gk = None
        if x.requires_grad:
            gcols = (gmat @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, :, i, j]
            gx = gxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = (cols.T @ gmat).reshape(kernel.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(gmat.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _node(out[0] if squeeze else out, parents, vjp, "conv2d")


def space_to_depth(x, block: int) -> Tensor:
    """Move each ``block x block`` spatial cell into channels (row-major within the cell)."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if h % block or w % block:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by block {block}")
    nl = len(lead)
    y = reshape(x, (*lead, h // block, block, w // block, block, c))
    axes = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    y = transpose(y, axes)
    return reshape(y, (*lead, h // block, w // block, block * block * c))


def depth_to_space(x, block: int) -> Tensor:
    """Inverse of :func:`space_to_depth` with the same block size."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if c % (block * block):
        raise ShapeError(f"channel count {c} not divisible by block^2={block * block}")
    nl = len(lead)
    oc = c // (block * block)
    y = reshape(x, (*lead, h, w, block, block, oc))
    axes = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    y = transpose(y, axes)
    return reshape(y, (*lead, h * block, w * block, oc))


def max_pool2d(x, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first window element."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by pool window {window}")
    nl = len(lead)
    cells = x.data.reshape(*lead, h // window, window, w // window, window, c)
    cells = np.moveaxis(cells, (nl + 1, nl + 3), (-2, -1)).reshape(*lead, h // window, w // window, c, window * window)
    idx = np.argmax(cells, axis=-1)[..., None]
    out = np.take_along_axis(cells, idx, -1)[..., 0]

    def vjp(g):
        gc = np.zeros(cells.shape, dtype=g.dtype)
        np.put_along_axis(gc, idx, g[..., None], -1)
        gc = gc.reshape(*lead, h // window, w // window, c, window, window)
        gc = np.moveaxis(gc, (-2, -1), (nl + 1, nl + 3))
        return (gc.reshape(x.shape),)

    return _node(out, (x,), vjp, "max_pool2d")


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over the two spatial axes."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs rank >= 3, got {x.shape}")
    return mean(x, axis=(-3, -2))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[Tensor, np.ndarray]:
    """Mean over rows of ``-log softmax(logits)[label]``; returns ``(loss, probabilities)``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [n, k], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "softmax_ce"), probs


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

class Graph:
    """The nodes reachable from an output, in insertion order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen = {id(output)}
        stack = [output]
        nodes = []
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Propagate ``dloss/d·`` to every gradient-tracking leaf.

    Returns a GradMap (``dict`` keyed by tensor).  Leaves listed in ``wrt``
    that do not participate in the graph receive zeros.  Each leaf's ``.grad``
    is also set.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {getattr(loss, 'shape', None)}")
    graph = Graph.trace(loss) if loss.requires_grad else Graph([])
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is not None:
        out = {}
        for t in wrt:
            if t not in result:
                t.grad = np.zeros_like(t.data)
            out[t] = t.grad
        return out
    return result


def finite_diff_check(fn: Callable, point, eps: float = 1e-6, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over the checked coordinates.

    ``point`` is a tensor or a mapping of named tensors; ``fn`` maps it to a
    scalar tensor.  With ``max_coords`` only that many coordinates per tensor
    (chosen by ``seed``) are perturbed.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    tensors = list(point.values()) if isinstance(point, Mapping) else [point]
    for t in tensors:
        t.requires_grad = True
        # Perturbations are written through a flat view, which needs C order.
        t.data = np.ascontiguousarray(t.data)
    out = fn(point)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    grads = backward(out, wrt=tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = grads[t].reshape(-1)
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(point).data)
                flat[i] = orig - eps
                fm = float(fn(point).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                worst = max(worst, abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric)))
    return worst
