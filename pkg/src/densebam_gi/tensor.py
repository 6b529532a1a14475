"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op records a closure that pushes the output gradient back to its
inputs.  Graph recording is skipped inside ``no_grad()`` and for ops whose
inputs do not require gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ContractError(ValueError):
    """Raised when an operation receives operands that violate its shape contract."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable tensor with a checkpoint name."""

    __slots__ = ("name", "decay")

    def __init__(self, data, name: str = "", decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        # whether the L2 penalty applies (off for biases, norm affine terms, step sizes)
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every tensor that requires grad and reaches ``loss``."""
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``x + floor``."""
    d = x.data + floor
    return _make(np.log(d), (x,), lambda g: (g / d,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * g * d,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ContractError(f"concat shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return tuple(res)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw)


def pick(x: Tensor, ids) -> Tensor:
    """``x[..., ids]`` elementwise along the last axis: out[i] = x[i, ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(ids.size)
    flat = x.data.reshape(-1, x.shape[-1])
    shape = x.shape

    def bw(g):
        out = np.zeros_like(flat)
        out[rows, ids.reshape(-1)] = g.reshape(-1)
        return (out.reshape(shape),)

    return _make(flat[rows, ids.reshape(-1)].reshape(ids.shape), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ContractError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    # promote vectors to matrices so one backward rule covers every case
    ad = a.data[None, :] if a.ndim == 1 else a.data
    bd = b.data[:, None] if b.ndim == 1 else b.data
    y = ad @ bd
    if b.ndim == 1:
        y = y[..., 0]
    if a.ndim == 1:
        y = y[..., 0, :] if b.ndim > 1 else y[..., 0]

    def bw(g):
        if b.ndim == 1:
            g = g[..., None]
        if a.ndim == 1:
            g = g[..., None, :]
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape).reshape(b.shape)
        return ga, gb

    return _make(y, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` stored as out x in."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear expects input width {weight.shape[1]}, got {x.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        res = [g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1])]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(y, parents, bw)


# ---------------------------------------------------------------- convolution / pooling


def _out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    """Strided view of shape N x C x kh x kw x ho x wo over a padded input."""
    n, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of N x C x H x W input with an O x C x kh x kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ContractError(f"kernel has {kc} input channels, input has {c}")
    if stride < 1 or dilation < 1:
        raise ContractError("stride and dilation must be >= 1")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ContractError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    kmat = kernel.data.reshape(o, c * kh * kw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col in channel-major layout: rows (C, kh, kw), columns (N, ho, wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    cols[...] = _windows(xp, kh, kw, ho, wo, stride, dilation).transpose(1, 2, 3, 0, 4, 5)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    y = (kmat @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        if bias.shape != (o,):
            raise ContractError(f"bias shape {bias.shape} does not match {o} output channels")
        y += bias.data[:, None, None, None]
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gk = (gmat @ cols.T).reshape(kernel.shape)
        res = [None, gk]
        if bias is not None:
            res.append(gmat.sum(axis=1))
        if not x.requires_grad:
            return tuple(res)
        back_pad = dilation * (kh - 1) - padding
        if stride == 1 and kh == kw and back_pad >= 0 and o < c:
            # input gradient as a correlation of g with the flipped, transposed kernel
            flipped = Tensor(np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
            with no_grad():
                res[0] = conv2d(Tensor(g), flipped, padding=back_pad, dilation=dilation).data
            return tuple(res)
        gcols = (kmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
        if kh == kw == 1 and stride == 1 and padding == 0:
            res[0] = gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            return tuple(res)
        gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        res[0] = gx.transpose(1, 0, 2, 3)
        return tuple(res)

    return _make(y, parents, bw)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Mean pooling with floor semantics (trailing rows/cols that do not fill a window are dropped)."""
    stride = stride or window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ContractError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = _windows(x.data, window, window, ho, wo, stride, 1)
    y = win.mean(axis=(2, 3))
    scale = 1.0 / (window * window)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gs
        return (gx,)

    return _make(y, (x,), bw)


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or window
    n, c, h, w = x.shape
    ho = _out_size(h, window, stride, padding, 1)
    wo = _out_size(w, window, stride, padding, 1)
    if ho < 1 or wo < 1:
        raise ContractError(f"pool window {window} larger than input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = _windows(xp, window, window, ho, wo, stride, 1).reshape(n, c, window * window, ho, wo)
    arg = win.argmax(axis=2)
    y = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for k in range(window * window):
            i, j = divmod(k, window)
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == k)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx,)

    return _make(y, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(y, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    if eps <= 0:
        raise ContractError("batch_norm epsilon must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / (m - 1) if m > 1 else var)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = xd.size // xd.shape[1]
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _make(y, (x, gamma, beta), bw)


# ---------------------------------------------------------------- misc helpers


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def parameters_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
