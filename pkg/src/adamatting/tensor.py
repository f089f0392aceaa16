"""Dense N-D tensors with reverse-mode automatic differentiation.

Every op computes its forward result with numpy, checks it is finite and, when
any input participates in the tape, records a closure mapping the output
gradient to input gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order.

Runtime tensors are float32. Gradient checks run the same code in float64;
switch with :func:`default_dtype` or ``Module.astype``.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NonFiniteError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """An array plus its place on the gradient tape.

    ``grad`` accumulates across calls to :meth:`backward`; call
    :meth:`zero_grad` (or ``Module.zero_grad``) between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not on the tape")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_default_dtype()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = a.dtype.type(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)), "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _result((xd * cdf).astype(x.dtype), (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions / shape -----------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out, dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)

    def back(g):
        gx = np.zeros(src_shape, dtype=dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(x.data[idx]), (x,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat shapes disagree: {[u.shape for u in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover extent {x.shape[axis]}")
    out, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(lo, lo + n)
        out.append(index(x, tuple(sl)))
        lo += n
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim > 2 and b.ndim > 2:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _result(np.matmul(ad, bd), (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` on a (tokens, in) matrix."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear expects width {w.shape[0]}, got {x.shape[-1]}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False get weight 0."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for ndim {x.ndim}")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


# -- convolution / resampling -------------------------------------------------
def _conv_out(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           dilation: int = 1) -> Tensor:
    """Cross-correlation of a C_in×H×W map with a C_out×C_in×k×k kernel."""
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W input and 4-D kernel, got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise DimensionError(f"conv2d channel/kernel mismatch: input {x.shape}, kernel {w.shape}")
    if k % 2 == 0:
        raise DimensionError(f"conv2d kernel size must be odd, got {k}")
    ho, wo = _conv_out(h, k, stride, pad, dilation), _conv_out(wd, k, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}×{wo} is not positive")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    spans = []
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            sl = (slice(None),
                  slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
                  slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride))
            spans.append((i, j, sl))
            cols[:, i, j] = xp[sl]
    cols2 = cols.reshape(c * k * k, ho * wo)
    w2 = w.data.reshape(o, c * k * k)
    out = (w2 @ cols2).reshape(o, ho, wo)
    if b is not None:
        out = out + b.data.reshape(o, 1, 1)
    padded_shape = xp.shape

    def back(g):
        g2 = g.reshape(o, ho * wo)
        gw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, k, k, ho, wo)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for i, j, sl in spans:
                gxp[sl] += gcols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, back, "conv2d")


def separable_map(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ x[c] @ cols.T`` to every channel of a C×H×W map."""
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise DimensionError(f"separable map expects {rows.shape[1]}×{cols.shape[1]}, got {x.shape}")
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),), "separable_map")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out × n_in), half-pixel centres, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Box-average weights for integer downsampling factors."""
    if n_in % n_out:
        raise DimensionError(f"area resize needs an integer factor, got {n_in}->{n_out}")
    f = n_in // n_out
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for d in range(n_out):
        m[d, d * f:(d + 1) * f] = 1.0 / f
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target {out_h}×{out_w} must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,), "resize_identity")
    return separable_map(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


def area_downsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    return separable_map(x, area_matrix(h, out_h), area_matrix(w, out_w))


def window_gather(x: Tensor, omega: int) -> tuple[Tensor, np.ndarray]:
    """Collect the ω×ω neighbourhood of every position of a C×H×W map.

    Returns a (H·W, ω², C) tensor and a (H·W, ω²) validity mask; cells outside
    the map are zero-filled and flagged invalid.
    """
    if omega % 2 == 0:
        raise DimensionError(f"window size must be odd, got {omega}")
    c, h, w = x.shape
    r = omega // 2
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r)))
    out = np.empty((h, w, omega, omega, c), dtype=x.dtype)
    for i in range(omega):
        for j in range(omega):
            out[:, :, i, j, :] = np.moveaxis(xp[:, i:i + h, j:j + w], 0, -1)
    yy = np.arange(h)[:, None, None, None] + np.arange(omega)[None, None, :, None] - r
    xx = np.arange(w)[None, :, None, None] + np.arange(omega)[None, None, None, :] - r
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    valid = valid.reshape(h * w, omega * omega)

    def back(g):
        g = g.reshape(h, w, omega, omega, c)
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(omega):
            for j in range(omega):
                gp[:, i:i + h, j:j + w] += np.moveaxis(g[:, :, i, j, :], -1, 0)
        return (gp[:, r:r + h, r:r + w],)

    return _result(out.reshape(h * w, omega * omega, c), (x,), back, "window_gather"), valid


# -- normalisation --------------------------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"layer_norm width {gamma.shape[-1]} != input {x.shape[-1]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out.astype(x.dtype), (x, gamma, beta), back, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of a C×H×W map.

    In training mode the statistics come from the map itself and the running
    buffers are updated in place; otherwise the running buffers are used.
    """
    c = x.shape[0]
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm expects {gamma.shape[0]} channels, got {c}")
    xd = x.data
    axes = tuple(range(1, x.ndim))
    shape = (c,) + (1,) * (x.ndim - 1)
    gd = gamma.data.reshape(shape)
    if training:
        n = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (n / max(n - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def back(g):
            gxhat = g * gd
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(shape).astype(xd.dtype) + eps)
        xhat = (xd - running_mean.reshape(shape).astype(xd.dtype)) * inv

        def back(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(shape)
    return _result(out.astype(x.dtype), (x, gamma, beta), back, "batch_norm")


def norm_layer(x: Tensor, kind: str, params) -> Tensor:
    """Dispatch to batch or layer normalisation with a parameter holder."""
    if kind == "layer":
        return layer_norm(x, params.weight, params.bias, params.eps)
    if kind == "batch":
        return batch_norm(x, params.weight, params.bias, params.running_mean, params.running_var,
                          params.training, params.momentum, params.eps)
    raise ValueError(f"unknown norm kind {kind!r}")


def tokens(x: Tensor) -> Tensor:
    """C×H×W map -> (H·W)×C token matrix."""
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)), (1, 0))


def untokens(t: Tensor, h: int, w: int) -> Tensor:
    """(H·W)×C token matrix -> C×H×W map."""
    return reshape(transpose(t, (1, 0)), (t.shape[1], h, w))


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or get_default_dtype()), requires_grad)


def total(values: Iterable[Tensor]) -> Tensor:
    acc = None
    for v in values:
        acc = v if acc is None else add(acc, v)
    if acc is None:
        raise ContractError("total() of nothing")
    return acc
