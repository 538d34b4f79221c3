import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformerkit import nn
from conformerkit import tensor as T
from conformerkit.errors import ContractError, DimensionError, InputTooShortError
from conformerkit.params import ParamStore
from conformerkit.rng import RNG
from conformerkit.tensor import Tensor


def rnd(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).uniform(-scale, scale, size=shape)


def jitter(store, seed=0, scale=0.3):
    gen = np.random.default_rng(seed)
    for t in store.trainable().values():
        t.data = t.data + scale * gen.normal(size=t.shape)
    return store


def mhsa_store(d, H, seed=0, rel_pos=True):
    store = ParamStore()
    nn.init_mhsa(store.scope("m"), d, H, RNG(seed), np.float64, rel_pos=rel_pos)
    return jitter(store, seed)


def softmax_rows(s, mask=None):
    s = s.copy()
    if mask is not None:
        s[~mask] = -np.inf
    m = s.max()
    if not np.isfinite(m):
        return np.zeros_like(s)
    e = np.exp(s - m)
    return e / e.sum()


def attention_loop(q, k, v, scale, mask=None):
    Tq, Tk = q.shape[0], k.shape[0]
    out = np.zeros((Tq, v.shape[1]))
    for i in range(Tq):
        s = np.array([q[i] @ k[j] for j in range(Tk)]) * scale
        w = softmax_rows(s, None if mask is None else mask[i])
        out[i] = sum(w[j] * v[j] for j in range(Tk))
    return out


def mhsa_loop(x, p, H, mask=None, rel=True, scale=None):
    """Per-head, per-position evaluation of the relative-position attention."""
    B, Tn, d = x.shape
    dk = d // H
    W = {n: p[f"{n}.weight"].data for n in ("q", "k", "v", "out")}
    b = {n: p[f"{n}.bias"].data for n in ("q", "k", "v", "out")}
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    table = nn.rel_pos_table(Tn, d, np.float64).data
    out = np.zeros_like(x)
    for bb in range(B):
        q = x[bb] @ W["q"] + b["q"]
        k = x[bb] @ W["k"] + b["k"]
        v = x[bb] @ W["v"] + b["v"]
        heads = []
        for h in range(H):
            sl = slice(h * dk, (h + 1) * dk)
            ctx = np.zeros((Tn, dk))
            for i in range(Tn):
                s = np.zeros(Tn)
                for j in range(Tn):
                    s[j] = (q[i, sl] + (p["pos_bias_u"].data[h] if rel else 0)) @ k[j, sl]
                    if rel:
                        r = table[Tn - 1 - (i - j)] @ p["pos.weight"].data
                        s[j] += (q[i, sl] + p["pos_bias_v"].data[h]) @ r[sl]
                w = softmax_rows(s * scale, None if mask is None else mask[bb])
                ctx[i] = w @ v[:, sl]
            heads.append(ctx)
        out[bb] = np.concatenate(heads, axis=1) @ W["out"] + b["out"]
    return out


# -- scaled dot attention ---------------------------------------------------

def test_attention_single_key_returns_v():
    q, k, v = Tensor(rnd(1, 4)), Tensor(rnd(1, 4, seed=1)), Tensor(rnd(1, 4, seed=2))
    np.testing.assert_allclose(nn.scaled_dot_attention(q, k, v).data, v.data)


def test_attention_identical_keys_average_values():
    q = Tensor(rnd(3, 4))
    k = Tensor(np.tile(rnd(1, 4, seed=1), (5, 1)))
    v = Tensor(rnd(5, 2, seed=2))
    out = nn.scaled_dot_attention(q, k, v).data
    np.testing.assert_allclose(out, np.tile(v.data.mean(0), (3, 1)), atol=1e-12)


def test_attention_matches_loop():
    q, k, v = rnd(3, 6), rnd(3, 6, seed=1), rnd(3, 5, seed=2)
    scale = 1 / math.sqrt(12)
    got = nn.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), scale=scale).data
    np.testing.assert_allclose(got, attention_loop(q, k, v, scale), atol=1e-12)


def test_attention_masked_keys_get_zero_weight():
    q, k = Tensor(rnd(2, 4)), Tensor(rnd(3, 4, seed=1))
    mask = np.array([[True, False, True], [False, False, False]])
    v = Tensor(np.eye(3))  # output rows are the attention weights
    w = nn.scaled_dot_attention(q, k, v, mask).data
    assert w[0, 1] == 0.0
    assert w[0].sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(w[1], 0.0)


# -- relative positions ------------------------------------------------------

def test_rel_pos_table_basics():
    d, Tn = 8, 4
    tab = nn.rel_pos_table(Tn, d, np.float64).data
    assert tab.shape == (2 * Tn - 1, d)
    zero = tab[Tn - 1]
    np.testing.assert_array_equal(zero[0::2], 0.0)
    np.testing.assert_array_equal(zero[1::2], 1.0)
    assert nn.rel_pos_table(1, d).shape == (1, d)
    for k in range(1, Tn):
        pos, neg = tab[Tn - 1 - k], tab[Tn - 1 + k]
        np.testing.assert_allclose(pos[1::2], neg[1::2], atol=1e-15)
        np.testing.assert_allclose(pos[0::2], -neg[0::2], atol=1e-15)


def test_rel_pos_table_is_pure():
    a = nn.rel_pos_table(6, 10).data
    b = nn.rel_pos_table(6, 10).data
    assert a.tobytes() == b.tobytes()


# -- MHSA ----------------------------------------------------------------------

def test_mhsa_matches_naive_loop_with_rel_pos():
    d, H, Tn = 8, 4, 5
    p = mhsa_store(d, H).scope("m")
    x = rnd(2, Tn, d, seed=3)
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    got = nn.mhsa(Tensor(x), p, H, mask[:, None, None, :], nn.rel_pos_table(Tn, d, np.float64)).data
    np.testing.assert_allclose(got, mhsa_loop(x, p, H, mask), atol=1e-10)


def test_mhsa_per_head_scale_switch():
    d, H, Tn = 8, 2, 3
    p = mhsa_store(d, H).scope("m")
    x = rnd(1, Tn, d, seed=4)
    got = nn.mhsa(Tensor(x), p, H, None, nn.rel_pos_table(Tn, d, np.float64), scale_mode="head").data
    np.testing.assert_allclose(got, mhsa_loop(x, p, H, scale=1 / math.sqrt(d // H)), atol=1e-10)


def test_mhsa_single_head_without_position_term():
    d = 6
    p = mhsa_store(d, 1, rel_pos=False).scope("m")
    x = Tensor(rnd(1, 4, d))
    q, k, v = (nn.linear(x, p, n) for n in "qkv")
    ref = nn.linear(nn.scaled_dot_attention(q, k, v, scale=1 / math.sqrt(d)), p, "out").data
    np.testing.assert_allclose(nn.mhsa(x, p, 1).data, ref, atol=1e-12)


def test_mhsa_zero_output_projection():
    p = mhsa_store(8, 2)
    p["m.out.weight"].data[...] = 0
    p["m.out.bias"].data[...] = 0
    out = nn.mhsa(Tensor(rnd(2, 4, 8)), p.scope("m"), 2, None, nn.rel_pos_table(4, 8, np.float64))
    np.testing.assert_array_equal(out.data, 0.0)


def test_mhsa_width_mismatch():
    with pytest.raises(DimensionError):
        nn.mhsa(Tensor(rnd(1, 3, 6)), mhsa_store(8, 2).scope("m"), 2)


def test_mhsa_permutation_equivariant_without_positions():
    p = mhsa_store(8, 2, rel_pos=False).scope("m")
    x = rnd(1, 6, 8)
    perm = np.random.default_rng(0).permutation(6)
    a = nn.mhsa(Tensor(x), p, 2).data
    b = nn.mhsa(Tensor(x[:, perm]), p, 2).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-12)


def test_mhsa_gradient_including_position_biases():
    store = mhsa_store(8, 2)
    x = Tensor(rnd(2, 4, 8), requires_grad=True)
    rel = nn.rel_pos_table(4, 8, np.float64)
    w = rnd(2, 4, 8, seed=5)
    rep = T.grad_check(lambda: (nn.mhsa(x, store.scope("m"), 2, None, rel) * w).sum(),
                       {"x": x, **store.trainable()})
    assert rep.passed, str(rep)
    assert {"m.pos_bias_u", "m.pos_bias_v", "m.pos.weight"} <= set(rep.per_tensor)


# -- CONV module ---------------------------------------------------------------

def conv_store(C, k, seed=0, dtype=np.float64):
    store = ParamStore()
    nn.init_conv_module(store.scope("c"), C, k, RNG(seed), dtype)
    return store


def test_conv_module_zero_weights_give_zero():
    store = conv_store(4, 5)
    for name, t in store.trainable().items():
        t.data[...] = 0
    out = nn.conv_module(Tensor(rnd(2, 6, 4)), store.scope("c"), "eval")
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_module_collapses_to_swish():
    C = 3
    store = conv_store(C, 1)
    store["c.pw1.weight"].data[...] = np.concatenate([np.eye(C), np.zeros((C, C))])[:, :, None]
    store["c.pw1.bias"].data[...] = np.r_[np.zeros(C), np.full(C, 40.0)]  # open the gate
    store["c.dw.weight"].data[...] = 1.0
    store["c.pw2.weight"].data[...] = np.eye(C)[:, :, None]
    store["c.bn.running_var"].data[...] = 1.0 - 1e-5   # var + eps == 1
    x = rnd(2, 5, C)
    out = nn.conv_module(Tensor(x), store.scope("c"), "eval").data
    np.testing.assert_allclose(out, x / (1 + np.exp(-x)), atol=1e-12)


def test_conv_module_preserves_shape_and_gradient():
    store = jitter(conv_store(8, 5))
    x = Tensor(rnd(2, 7, 8), requires_grad=True)
    assert nn.conv_module(x, store.scope("c"), "eval").shape == (2, 7, 8)
    w = rnd(2, 7, 8, seed=2)
    before = {k: t.data.copy() for k, t in store.buffers().items()}

    def f():
        for k, v in before.items():
            store[k].data[...] = v
        return (nn.conv_module(x, store.scope("c"), "train") * w).sum()

    rep = T.grad_check(f, [x, *store.trainable().values()])
    assert rep.passed, str(rep)


def test_conv_module_train_updates_running_stats():
    store = conv_store(4, 3)
    nn.conv_module(Tensor(rnd(2, 6, 4)), store.scope("c"), "train")
    assert not np.allclose(store["c.bn.running_mean"].data, 0.0)


def test_conv_module_train_needs_two_frames():
    with pytest.raises(ContractError):
        nn.conv_module(Tensor(rnd(1, 1, 4)), conv_store(4, 3).scope("c"), "train")


def test_conv_module_padding_does_not_leak():
    store = jitter(conv_store(4, 5))
    x = rnd(1, 5, 4)
    padded = np.concatenate([x, rnd(1, 3, 4, seed=9) * 100], axis=1)
    a = nn.conv_module(Tensor(x), store.scope("c"), "eval").data
    b = nn.conv_module(Tensor(padded), store.scope("c"), "eval",
                       frame_mask=np.array([[True] * 5 + [False] * 3])).data
    np.testing.assert_allclose(a, b[:, :5], atol=1e-12)


# -- FFN -------------------------------------------------------------------------

def ffn_store(d, dff, seed=0):
    store = ParamStore()
    nn.init_ffn(store.scope("f"), d, dff, RNG(seed), np.float64)
    return store


def test_ffn_constant_output():
    store = ffn_store(4, 6)
    store["f.w1.weight"].data[...] = 0
    store["f.w2.weight"].data[...] = 0
    store["f.w2.bias"].data[...] = [1, 2, 3, 4]
    out = nn.ffn(Tensor(rnd(2, 3, 4)), store.scope("f")).data
    np.testing.assert_array_equal(out, np.broadcast_to([1, 2, 3, 4], (2, 3, 4)))


def test_ffn_dead_relu():
    store = ffn_store(4, 6)
    store["f.w1.bias"].data[...] = -100
    store["f.w2.bias"].data[...] = 0.5
    out = nn.ffn(Tensor(rnd(2, 3, 4)), store.scope("f"), "relu").data
    np.testing.assert_array_equal(out, 0.5)


def test_ffn_gradient():
    store = jitter(ffn_store(4, 6))
    x = Tensor(rnd(2, 3, 4), requires_grad=True)
    rep = T.grad_check(lambda: (nn.ffn(x, store.scope("f")) ** 2).sum(), [x, *store.trainable().values()])
    assert rep.passed, str(rep)


# -- subsampler -----------------------------------------------------------------

def test_subsampled_length_examples():
    assert nn.subsampled_length(16) == 3
    assert nn.subsampled_length(7) == 1
    lens = np.array([7, 16, 31, 64])
    np.testing.assert_array_equal(nn.subsampled_length(lens), [nn.subsampled_length(int(n)) for n in lens])


@given(st.integers(7, 400))
def test_subsampled_length_formula(n):
    once = (n - 3) // 2 + 1
    assert nn.subsampled_length(n) == (once - 3) // 2 + 1


def test_subsample_output_shape_and_errors():
    store = ParamStore()
    nn.init_subsampler(store.scope("s"), 10, 8, RNG(0), channels=4, dtype=np.float64)
    out, lens = nn.subsample(Tensor(rnd(2, 16, 10)), [16, 11], store.scope("s"))
    assert out.shape == (2, 3, 8)
    np.testing.assert_array_equal(lens, [3, 2])
    with pytest.raises(InputTooShortError):
        nn.subsample(Tensor(rnd(1, 6, 10)), [6], store.scope("s"))


def test_subsample_gradient():
    store = ParamStore()
    nn.init_subsampler(store.scope("s"), 9, 6, RNG(0), channels=3, dtype=np.float64)
    jitter(store)
    x = Tensor(rnd(1, 11, 9), requires_grad=True)
    w = rnd(1, 2, 6, seed=3)
    rep = T.grad_check(lambda: (nn.subsample(x, [11], store.scope("s"))[0] * w).sum(),
                       [x, *store.trainable().values()])
    assert rep.passed, str(rep)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6))
def test_attention_rows_sum_to_one(Tn):
    q, k = Tensor(rnd(Tn, 4, seed=Tn)), Tensor(rnd(Tn, 4, seed=Tn + 1))
    w = nn.scaled_dot_attention(q, k, Tensor(np.eye(Tn))).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
