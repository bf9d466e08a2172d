"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the model zoo are provided. Every forward op
checks its output for NaN/Inf and raises :class:`NonFiniteError`.

Usage::

    x = Tensor(np.array([1.0, -3.0]), requires_grad=True)
    with GradTape() as tape:
        loss = (x * x).sum()
    grads = backward(loss, tape)
    grads[x]          # array([ 2., -6.])
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5

_GELU_C = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Operand shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class GradTape:
    """Ordered record of executed ops; replayed once in reverse by :func:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        if tape.consumed:
            raise TapeError("cannot record on a consumed tape")
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
        return out
    return Tensor(data)


class Gradients:
    """Gradient map returned by :func:`backward`.

    Lookup of any tensor that requires grad but was never reached yields zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray], refs: dict[int, Tensor]):
        self._grads = grads
        self._refs = refs

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is not None and self._refs.get(id(t)) is t:
            return g
        return np.zeros_like(t.data)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._refs.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    refs: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                refs[key] = t
    tape.records = []
    return Gradients(grads, refs)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def l1_norm(a: Tensor) -> Tensor:
    # subgradient of |x| at 0 is 0
    s = np.sign(a.data)
    return _make(np.abs(a.data).sum(), (a,), lambda g: (g * s,), "l1_norm")


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    shape, n = a.shape, a.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(shape, g / n),), "mean")


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) with a constant weight array."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")
    return _make(np.sum(a.data * w), (a,), lambda g: (g * w,), "weighted_sum")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------- contractions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape[-1]} != {b.shape[-2]}", axis=-1)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with w stored as (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}",
                         axis="in_features")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs out-features {wd.shape[0]}", axis="out_features")
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, bw, "linear")


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis", axis=-1)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, w: Tensor, b: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if w.shape != (d,) or b.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {w.shape}/{b.shape} vs features {d}", axis=-1)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wd = w.data

    def bw(g):
        gxhat = g * wd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, d)
        return (gx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0))

    return _make(xhat * wd + b.data, (x, w, b), bw, "layer_norm")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and (Cout, Cin, k, k) weight")
    n, cin, h, wd_ = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight Cin {wcin}", axis="Cin")
    if k != k2:
        raise ShapeError("conv2d: only square kernels", axis="k")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1", axis="stride")
    if k > h + 2 * padding or k > wd_ + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h}x{wd_}+{padding}", axis="H")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} vs Cout {cout}", axis="Cout")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd_ + 2 * padding - k) // stride + 1
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wdata = w.data
    out = np.tensordot(win, wdata, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)
    padded_shape = xd.shape

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, wdata, axes=([1], [0]))  # n, ho, wo, cin, k, k
        gxp = np.zeros(padded_shape)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd_] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, inputs, bw, "conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: input {h}x{w} smaller than kernel {k}", axis="H")
    xd = x.data[:, :, :ho * k, :wo * k]
    blocks = xd.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape)
        gx[:, :, :ho * k, :wo * k] = (gb.reshape(n, c, ho, wo, k, k)
                                      .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k))
        return (gx,)

    return _make(out, (x,), bw, "maxpool2d")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, eps: float = BN_EPS,
              momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm expects NCHW input")
    c = x.shape[1]
    for nm, t in (("gamma", gamma.data), ("beta", beta.data), ("mean", running_mean), ("var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm: {nm} has shape {t.shape}, input has {c} channels", axis="C")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if not training and np.any(running_var + eps <= 0):
        raise ValueError("running_var + eps must be positive")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * m / max(m - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bw(g):
            gxhat = g * gd
            gx = inv[None, :, None, None] * (
                gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]

        def bw(g):
            return (g * gd * inv[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    out = xhat * gd + beta.data[None, :, None, None]
    return _make(out, (x, gamma, beta), bw, "batchnorm")


def xcorr(z: Tensor, x: Tensor) -> Tensor:
    """Per-sample cross-correlation of template features ``z`` over search features ``x``.

    (N,C,h,w) x (N,C,H,W) -> (N,1,H-h+1,W-w+1), summed over channels.
    """
    if z.ndim != 4 or x.ndim != 4:
        raise ShapeError("xcorr expects NCHW operands")
    n, c, h, w = z.shape
    if x.shape[:2] != (n, c):
        raise ShapeError(f"xcorr: template {z.shape} vs search {x.shape}", axis="C")
    hh, ww = x.shape[2], x.shape[3]
    if h > hh or w > ww:
        raise ShapeError(f"xcorr: template features {h}x{w} larger than search {hh}x{ww}", axis="H")
    ho, wo = hh - h + 1, ww - w + 1
    zd, xd = z.data, x.data
    win = sliding_window_view(xd, (h, w), axis=(2, 3))  # n c ho wo h w
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * h * w)
    out = (cols @ zd.reshape(n, c * h * w, 1)).reshape(n, 1, ho, wo)

    def bw(g):
        g2 = g.reshape(n, 1, ho * wo)
        gz = (g2 @ cols).reshape(n, c, h, w)
        gx = np.zeros_like(xd)
        gg = g.reshape(n, 1, ho, wo)
        for i in range(h):
            for j in range(w):
                gx[:, :, i:i + ho, j:j + wo] += gg * zd[:, :, i, j][:, :, None, None]
        return gz, gx

    return _make(out, (z, x), bw, "xcorr")
