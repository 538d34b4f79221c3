"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array.  Every differentiable primitive
returns a new tensor that remembers its parents and a closure mapping the
output gradient to parent gradients.  :func:`backward` walks that graph in
reverse topological order (materialised as a :class:`Tape`) and writes the
gradient of every reachable leaf into ``leaf.grad``.

Sequence tensors use the time-major ``[B, T, C]`` layout throughout.
Training runs in float32; :func:`grad_check` is meant for float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError, NumericFault

__all__ = [
    "Tensor", "Tape", "BNState", "GradCheckReport",
    "as_tensor", "no_grad", "checked", "is_checked", "set_checked",
    "matmul", "softmax", "log_softmax", "layer_norm", "batch_norm", "conv1d",
    "conv2d", "glu", "activation", "relu", "sigmoid", "swish", "dropout",
    "concat", "stack", "where", "rel_shift", "backward", "grad_check",
]


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.checked = True


_STATE = _State()


def is_checked() -> bool:
    return _STATE.checked


def set_checked(flag: bool) -> None:
    _STATE.checked = bool(flag)


@contextlib.contextmanager
def checked(flag: bool = True):
    """Temporarily turn the non-finite output check on or off."""
    prev = _STATE.checked
    _STATE.checked = bool(flag)
    try:
        yield
    finally:
        _STATE.checked = prev


@contextlib.contextmanager
def no_grad():
    """Run operations without recording the graph."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def astype(self, dtype):
        return astype(self, dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        return Tensor(arr)
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(x, like: Tensor) -> Tensor:
    """Wrap constants so they adopt the dtype of the tensor operand."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if _STATE.checked and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericFault(f"non-finite value in output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    needs = _STATE.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = float(exponent)
    return _result(ad ** e, (a,), lambda g: (g * e * ad ** (e - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def astype(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return _result(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "astype")


def where(mask, a: Tensor, fill: float = 0.0) -> Tensor:
    """``a`` where ``mask`` is true, the constant ``fill`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, np.asarray(fill, dtype=a.dtype))
    shape = a.shape
    return _result(out, (a,), lambda g: (_unbroadcast(np.where(mask, g, 0), shape),), "where")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        raise ContractError("index with integer arrays, not Tensors")
    shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(key)
    if advanced:
        key = tuple(np.asarray(k) if isinstance(k, list) else k for k in key) \
            if isinstance(key, tuple) else np.asarray(key)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        return (gx,)

    return _result(np.array(a.data[key]), (a,), bw, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(out, tuple(tensors), bw, "stack")


def rel_shift(a: Tensor) -> Tensor:
    """Map ``[..., T, 2T-1]`` offset-indexed scores to ``[..., T, T]``.

    Column ``m`` of the input holds relative offset ``T-1-m``; the output
    entry ``(i, j)`` is input column ``T-1-i+j``, i.e. offset ``i-j``.
    """
    T = a.shape[-2]
    if a.shape[-1] != 2 * T - 1:
        raise DimensionError(f"rel_shift expects [..., T, 2T-1], got {a.shape}")
    rows = np.arange(T)[:, None]
    cols = T - 1 - rows + np.arange(T)[None, :]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[..., rows, cols] = g
        return (gx,)

    return _result(a.data[..., rows, cols], (a,), bw, "rel_shift")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` over ``[..., m, k] x [..., k, n]``."""
    a, b = (_lift(a, b), b) if not isinstance(a, Tensor) else (a, _lift(b, a))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch prefixes not broadcastable: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * np.tanh(0.5 * x) + 0.5


def relu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    return _result(np.where(pos, ad, 0).astype(ad.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def swish(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return _result(ad * s, (a,), lambda g: (g * (s + ad * s * (1 - s)),), "swish")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


_ACTIVATIONS = {"relu": relu, "swish": swish, "sigmoid": sigmoid, "tanh": tanh}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}", "activation") from None
    return fn(a)


def glu(a: Tensor) -> Tensor:
    """Gated linear unit: split the last axis into halves ``(x, gate)``."""
    if a.shape[-1] % 2:
        raise DimensionError(f"glu needs an even last extent, got {a.shape}")
    c = a.shape[-1] // 2
    x, b = a.data[..., :c], a.data[..., c:]
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * x * s * (1 - s)], axis=-1),)

    return _result(x * s, (a,), bw, "glu")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = keep) gives excluded entries a
    weight of exactly zero.  A row with no kept entry is all zeros.
    """
    x = a.data
    if mask is None:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        xm = np.where(mask, x, -np.inf)
        m = xm.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        with np.errstate(invalid="ignore", over="ignore"):
            e = np.where(mask, np.exp(xm - m), 0).astype(x.dtype)
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (a, gamma, beta), bw, "layer_norm")


@dataclass
class BNState:
    """Running statistics of a batch-norm layer (mutated in train mode)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batch_norm(a: Tensor, gamma: Tensor, beta: Tensor, state: BNState, mode: str = "train") -> Tensor:
    """Per-channel batch norm over a ``[B, T, C]`` input.

    Train mode normalises with the biased batch variance and blends the
    unbiased variance into the running estimate; eval mode only reads the
    running statistics.
    """
    x = a.data
    C = x.shape[-1]
    if state.running_mean.shape != (C,) or gamma.shape != (C,):
        raise DimensionError(f"batch_norm channel mismatch: input {x.shape}, state {state.running_mean.shape}")
    axes = tuple(range(x.ndim - 1))
    gd = gamma.data
    if mode == "train":
        n = x.size // C
        if n < 2:
            raise ContractError("batch_norm in train mode needs at least 2 frames per channel")
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        rstd = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * rstd
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))

        def bw(g):
            gxhat = g * gd
            gx = rstd * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif mode == "eval":
        rstd = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.dtype)
        xhat = (x - state.running_mean.astype(x.dtype)) * rstd

        def bw(g):
            return g * gd * rstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}", "mode")
    return _result(xhat * gd + beta.data, (a, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _padding(padding, k: int) -> tuple[int, int]:
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError("'same' padding needs an odd kernel", "kernel_size")
        return k // 2, k // 2
    if isinstance(padding, int):
        return padding, padding
    return tuple(padding)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, groups: int = 1,
           stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation along time for ``x: [B, T, C_in]``.

    ``w`` has shape ``[C_out, C_in // groups, k]``.  ``padding`` is an int,
    a ``(left, right)`` pair or ``"same"``.
    """
    B, T, cin = x.shape
    cout, cig, k = w.shape
    if cin % groups or cout % groups or cig != cin // groups:
        raise DimensionError(f"conv1d: input {x.shape}, weight {w.shape}, groups={groups}")
    pl, pr = _padding(padding, k)
    tp = T + pl + pr
    if k > tp:
        raise DimensionError(f"conv1d kernel {k} longer than padded input {tp}")
    tout = (tp - k) // stride + 1
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (pl, pr), (0, 0))) if (pl or pr) else xd
    G, cog = groups, cout // groups
    pointwise = k == 1 and stride == 1 and G == 1
    depthwise = cig == 1 and cog == 1

    if pointwise:
        wm = wd[:, :, 0]
        out = xp @ wm.T
    else:
        win = sliding_window_view(xp, k, axis=1)[:, ::stride]  # [B, tout, cin, k]
        if depthwise:
            out = np.einsum("btck,ck->btc", win, wd[:, 0, :], optimize=True)
        else:
            win_g = win.reshape(B, tout, G, cig, k)
            out = np.einsum("btgik,goik->btgo", win_g, wd.reshape(G, cog, cig, k),
                            optimize=True).reshape(B, tout, cout)
    if bias is not None:
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        if pointwise:
            gx = g @ wm
            gw = (g.reshape(-1, cout).T @ xp.reshape(-1, cin))[:, :, None]
        else:
            if depthwise:
                gw = np.einsum("btc,btck->ck", g, win, optimize=True)[:, None, :]
                gwin = g[..., None] * wd[:, 0, :]
            else:
                g_g = g.reshape(B, tout, G, cog)
                gw = np.einsum("btgo,btgik->goik", g_g, win_g, optimize=True).reshape(cout, cig, k)
                gwin = np.einsum("btgo,goik->btgik", g_g, wd.reshape(G, cog, cig, k),
                                 optimize=True).reshape(B, tout, cin, k)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            span = stride * (tout - 1) + 1
            for j in range(k):
                gxp[:, j:j + span:stride, :] += gwin[..., j]
            gx = gxp[:, pl:pl + T]
        grads = (gx, gw.astype(wd.dtype))
        if bias is not None:
            grads += (g.sum(axis=(0, 1)),)
        return grads

    return _result(np.ascontiguousarray(out), parents, bw, "conv1d")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Unpadded 2-D cross-correlation for channel-last ``x: [B, H, W, C_in]``.

    ``w`` has shape ``[C_out, C_in, kh, kw]``.
    """
    B, H, W, cin = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input {x.shape}, weight {w.shape}")
    if kh > H or kw > W:
        raise DimensionError(f"conv2d kernel {(kh, kw)} larger than input {(H, W)}")
    ho, wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    xd, wd = x.data, w.data
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.reshape(B * ho * wo, cin * kh * kw)
    wm = wd.reshape(cout, -1)
    out = cols @ wm.T
    if bias is not None:
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ wm).reshape(B, ho, wo, cin, kh, kw)
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        sh, sw = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + sh:stride, j:j + sw:stride, :] += gcols[..., i, j]
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _result(out.reshape(B, ho, wo, cout), parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# regularisation
# ---------------------------------------------------------------------------

def dropout(a: Tensor, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}", "dropout")
    if mode == "eval" or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = rng.generator().random(a.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.dtype)
    factor = keep * scale
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "dropout")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Tape:
    """Reverse-topological record of the graph that produced ``output``.

    Building the tape does not touch any tensor; :meth:`run` may be called
    any number of times and always yields the same gradients.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order[::-1]

    def __len__(self):
        return len(self.nodes)

    def run(self, seed_grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
        out = self.output
        if seed_grad is None:
            seed_grad = np.ones(out.shape, dtype=out.dtype)
        grads = {id(out): seed_grad}
        for node in self.nodes:
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return grads


def backward(loss: Tensor, params=None) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients overwrite (never accumulate into) existing ``.grad`` buffers.
    When ``params`` (a ParamStore or iterable of tensors) is given, trainable
    entries unreachable from ``loss`` receive zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape(loss)
    grads = tape.run()
    for node in tape.nodes:
        if not node._parents and id(node) in grads:
            node.grad = np.asarray(grads[id(node)], dtype=node.dtype).reshape(node.shape)
    if params is not None:
        tensors = params.trainable().values() if hasattr(params, "trainable") else params
        for t in tensors:
            if t.requires_grad and id(t) not in grads:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    checked_coords: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        worst = max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else "-"
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.0e}) "
                f"over {self.checked_coords} coords; worst tensor: {worst}")


def _named_tensors(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "trainable"):
        return list(params.trainable().items())
    if isinstance(params, dict):
        return [(k, v) for k, v in params.items() if v.requires_grad]
    return [(f"arg{i}", t) for i, t in enumerate(params)]


def grad_check(f, params, eps: float = 1e-6, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients with central finite differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params``.  The relative error of a tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``; the
    floor keeps tensors whose true gradient is identically zero (a bias in
    front of a normaliser, say) from dividing difference noise by itself.
    The report carries the worst value over all tensors.  ``max_coords`` caps the number
    of randomly chosen coordinates probed per tensor.
    """
    named = _named_tensors(params)
    loss = f()
    again = f()
    if not np.array_equal(loss.data, again.data):
        raise ContractError("grad_check: f is not deterministic (two forward calls disagree)")
    backward(loss, [t for _, t in named])
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tol=tol)
    for name, t in named:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        with no_grad():
            for n, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * eps)
        a = analytic[coords]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        err = float(np.abs(a - numeric).max(initial=0.0) / scale)
        report.per_tensor[name] = err
        report.checked_coords += len(coords)
        report.max_rel_error = max(report.max_rel_error, err)
    return report
