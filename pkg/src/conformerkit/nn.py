"""Conformer sub-modules.

Every module is a pair of functions: ``init_*`` registers parameters under a
:class:`~conformerkit.params.Scope` and the forward function reads them back
by name.  Linear weights are stored ``[d_in, d_out]`` so ``y = x @ W + b``;
convolution weights follow ``[C_out, C_in // groups, k]``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputTooShortError
from .tensor import Tensor

SUBSAMPLE_MIN_FRAMES = 7


# ---------------------------------------------------------------------------
# initialisation helpers
# ---------------------------------------------------------------------------

def _uniform(rng, name, shape, fan_in, dtype):
    s = 1.0 / math.sqrt(fan_in)
    return rng.child(name).generator().uniform(-s, s, size=shape).astype(dtype)


def init_linear(scope, name, d_in, d_out, rng, dtype=np.float32, bias=True):
    full = f"{scope.prefix}.{name}" if scope.prefix else name
    scope.add(f"{name}.weight", _uniform(rng, full, (d_in, d_out), d_in, dtype))
    if bias:
        scope.add(f"{name}.bias", np.zeros(d_out, dtype=dtype))


def init_layer_norm(scope, name, d, dtype=np.float32):
    scope.add(f"{name}.weight", np.ones(d, dtype=dtype))
    scope.add(f"{name}.bias", np.zeros(d, dtype=dtype))


def linear(x: Tensor, p, name: str) -> Tensor:
    y = x @ p[f"{name}.weight"]
    bias = f"{name}.bias"
    return y + p[bias] if bias in p else y


def norm(x: Tensor, p, name: str, eps: float = 1e-12) -> Tensor:
    return T.layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"], eps)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                         scale: float | None = None, extra_scores: Tensor | None = None) -> Tensor:
    """``softmax(q k^T * scale + extra) v`` over the last two axes.

    ``mask`` is boolean, broadcastable to the score shape, True where a key
    may be attended.  ``scale`` defaults to ``1/sqrt(d)`` with ``d`` the
    query width; rows without any valid key produce zeros.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = q @ k.swapaxes(-1, -2)
    if extra_scores is not None:
        scores = scores + extra_scores
    weights = T.softmax(scores * scale, axis=-1, mask=mask)
    return weights @ v


def rel_pos_table(T_len: int, d: int, dtype=np.float32) -> Tensor:
    """Sinusoidal embeddings for relative offsets ``T-1, ..., -(T-1)``."""
    pos = np.arange(T_len - 1, -T_len, -1, dtype=np.float64)[:, None]
    inv = np.exp(-np.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((2 * T_len - 1, d))
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv)[:, : d // 2]
    return Tensor(table.astype(dtype))


def init_mhsa(scope, d_att, heads, rng, dtype=np.float32, rel_pos=True):
    if d_att % heads:
        raise DimensionError(f"d_att={d_att} not divisible by heads={heads}")
    for name in ("q", "k", "v", "out"):
        init_linear(scope, name, d_att, d_att, rng, dtype)
    if rel_pos:
        init_linear(scope, "pos", d_att, d_att, rng, dtype, bias=False)
        dk = d_att // heads
        scope.add("pos_bias_u", np.zeros((heads, dk), dtype=dtype))
        scope.add("pos_bias_v", np.zeros((heads, dk), dtype=dtype))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dk)


def attention_scale(d_att: int, heads: int, mode: str = "model") -> float:
    """``1/sqrt(d_att)`` (``mode="model"``) or ``1/sqrt(d_att/H)`` (``"head"``)."""
    return 1.0 / math.sqrt(d_att if mode == "model" else d_att // heads)


def mhsa(x: Tensor, p, heads: int, mask=None, rel_pos: Tensor | None = None,
         memory: Tensor | None = None, scale_mode: str = "model") -> Tensor:
    """Multi-head attention of ``x: [B, T, d]`` over itself or ``memory``.

    With ``rel_pos`` (a ``[2T-1, d]`` table) the score of query ``i`` and
    key ``j`` is ``(q_i + u) . k_j + (q_i + v) . (W_pos r_{i-j})``.  Heads
    occupy consecutive column blocks of each projection, in head order.
    """
    d = x.shape[-1]
    if p["q.weight"].shape[0] != d:
        raise DimensionError(f"mhsa input width {d} vs projection {p['q.weight'].shape}")
    src = x if memory is None else memory
    q = _split_heads(linear(x, p, "q"), heads)
    k = _split_heads(linear(src, p, "k"), heads)
    v = _split_heads(linear(src, p, "v"), heads)
    scale = attention_scale(d, heads, scale_mode)
    if rel_pos is None:
        ctx = scaled_dot_attention(q, k, v, mask, scale)
    else:
        H, dk = heads, d // heads
        pos = (rel_pos @ p["pos.weight"]).reshape(rel_pos.shape[0], H, dk).transpose(1, 0, 2)
        qu = q + p["pos_bias_u"].reshape(1, H, 1, dk)
        qv = q + p["pos_bias_v"].reshape(1, H, 1, dk)
        bd = T.rel_shift(qv @ pos.swapaxes(-1, -2))
        ctx = scaled_dot_attention(qu, k, v, mask, scale, extra_scores=bd)
    return linear(_merge_heads(ctx), p, "out")


# ---------------------------------------------------------------------------
# convolution module
# ---------------------------------------------------------------------------

def init_conv_module(scope, channels, kernel, rng, dtype=np.float32):
    C = channels
    full = scope.prefix
    scope.add("pw1.weight", _uniform(rng, f"{full}.pw1", (2 * C, C, 1), C, dtype))
    scope.add("pw1.bias", np.zeros(2 * C, dtype=dtype))
    scope.add("dw.weight", _uniform(rng, f"{full}.dw", (C, 1, kernel), kernel, dtype))
    scope.add("dw.bias", np.zeros(C, dtype=dtype))
    scope.add("bn.weight", np.ones(C, dtype=dtype))
    scope.add("bn.bias", np.zeros(C, dtype=dtype))
    scope.add("bn.running_mean", np.zeros(C, dtype=dtype), trainable=False)
    scope.add("bn.running_var", np.ones(C, dtype=dtype), trainable=False)
    scope.add("pw2.weight", _uniform(rng, f"{full}.pw2", (C, C, 1), C, dtype))
    scope.add("pw2.bias", np.zeros(C, dtype=dtype))


def conv_module(x: Tensor, p, mode: str = "eval", frame_mask=None,
                bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> Tensor:
    """pointwise(C->2C) -> GLU -> depthwise -> BN -> Swish -> pointwise(C->C).

    ``frame_mask`` (``[B, T]`` bool, True = valid) zeroes padded frames before
    the depthwise convolution so they cannot leak into valid ones.
    """
    C = x.shape[-1]
    if p["pw1.weight"].shape[1] != C:
        raise DimensionError(f"conv module expects {p['pw1.weight'].shape[1]} channels, got {C}")
    h = T.glu(T.conv1d(x, p["pw1.weight"], p["pw1.bias"]))
    if frame_mask is not None:
        h = T.where(np.asarray(frame_mask)[:, :, None], h, 0.0)
    h = T.conv1d(h, p["dw.weight"], p["dw.bias"], groups=C, padding="same")
    h = T.batch_norm(h, p["bn.weight"], p["bn.bias"], p.bn_state("bn", bn_momentum, bn_eps), mode)
    h = T.swish(h)
    return T.conv1d(h, p["pw2.weight"], p["pw2.bias"])


# ---------------------------------------------------------------------------
# feed-forward module
# ---------------------------------------------------------------------------

def init_ffn(scope, d_att, d_ff, rng, dtype=np.float32):
    init_linear(scope, "w1", d_att, d_ff, rng, dtype)
    init_linear(scope, "w2", d_ff, d_att, rng, dtype)


def ffn(x: Tensor, p, act: str = "swish") -> Tensor:
    return linear(T.activation(linear(x, p, "w1"), act), p, "w2")


# ---------------------------------------------------------------------------
# convolutional subsampling (x4 in time)
# ---------------------------------------------------------------------------

def _conv_out(n):
    return (n - 3) // 2 + 1


def subsampled_length(n):
    """Frames left after two unpadded kernel-3 stride-2 convolutions."""
    n = np.asarray(n)
    out = _conv_out(_conv_out(n))
    return np.maximum(out, 0) if out.ndim else max(int(out), 0)


def init_subsampler(scope, feat_dim, d_att, rng, channels=256, dtype=np.float32):
    if feat_dim < SUBSAMPLE_MIN_FRAMES:
        raise InputTooShortError(f"feature width {feat_dim} < {SUBSAMPLE_MIN_FRAMES}")
    full = scope.prefix
    C = channels
    scope.add("conv1.weight", _uniform(rng, f"{full}.conv1", (C, 1, 3, 3), 9, dtype))
    scope.add("conv1.bias", np.zeros(C, dtype=dtype))
    scope.add("conv2.weight", _uniform(rng, f"{full}.conv2", (C, C, 3, 3), 9 * C, dtype))
    scope.add("conv2.bias", np.zeros(C, dtype=dtype))
    init_linear(scope, "out", C * int(subsampled_length(feat_dim)), d_att, rng, dtype)


def subsample(x: Tensor, lengths, p):
    """``[B, T, F] -> [B, T'', d_att]`` plus the recomputed valid lengths."""
    B, T_len, F = x.shape
    if T_len < SUBSAMPLE_MIN_FRAMES:
        raise InputTooShortError(f"need at least {SUBSAMPLE_MIN_FRAMES} frames, got {T_len}")
    h = T.relu(T.conv2d(x.reshape(B, T_len, F, 1), p["conv1.weight"], p["conv1.bias"], stride=2))
    h = T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2))
    _, t2, f2, C = h.shape
    out = linear(h.reshape(B, t2, f2 * C), p, "out")
    return out, subsampled_length(np.asarray(lengths))
