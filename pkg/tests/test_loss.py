import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformerkit import loss as LS
from conformerkit import tensor as T
from conformerkit.errors import ConfigError, ContractError, CTCInfeasibleError
from conformerkit.tensor import Tensor


def log_probs(Tn, C, seed=0):
    x = np.random.default_rng(seed).normal(size=(Tn, C))
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


def collapse(path):
    out, prev = [], None
    for k in path:
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


def ctc_brute(lp, target):
    """-log sum over every frame labelling that collapses to target."""
    Tn, C = lp.shape
    total = -np.inf
    for path in itertools.product(range(C), repeat=Tn):
        if collapse(path) == list(target):
            total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    return -total


# -- cross entropy --------------------------------------------------------------------

def test_ce_confident_correct_is_zero():
    logits = np.full((1, 3, 5), -50.0)
    tg = np.array([[1, 4, 0]])
    logits[0, np.arange(3), tg[0]] = 50.0
    assert LS.cross_entropy(Tensor(logits), tg).item() < 1e-30


def test_ce_uniform_is_log_v():
    assert LS.cross_entropy(Tensor(np.zeros((2, 3, 7))), np.ones((2, 3), int)).item() == pytest.approx(math.log(7))


def test_ce_label_smoothing_hand_formula():
    gen = np.random.default_rng(1)
    logits = gen.normal(size=(1, 2, 4))
    tg = np.array([[2, 0]])
    eps = 0.1
    expected = 0.0
    for i in range(2):
        z = logits[0, i]
        nll = -(z - math.log(sum(math.exp(v) for v in z)))
        expected += (1 - eps) * nll[tg[0, i]] + eps * nll.mean()
    got = LS.cross_entropy(Tensor(logits), tg, smoothing=eps).item()
    assert got == pytest.approx(expected / 2, abs=1e-12)


def test_ce_padding_ignored_and_all_pad_error():
    gen = np.random.default_rng(2)
    logits = gen.normal(size=(1, 3, 4))
    a = LS.cross_entropy(Tensor(logits), [[1, 2, -1]]).item()
    b = LS.cross_entropy(Tensor(logits[:, :2]), [[1, 2]]).item()
    assert a == pytest.approx(b, abs=1e-14)
    with pytest.raises(ContractError):
        LS.cross_entropy(Tensor(logits), [[-1, -1, -1]])
    with pytest.raises(ContractError):
        LS.cross_entropy(Tensor(logits), [[4, 0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_ce_unsmoothed_equals_neg_log_softmax(seed, V):
    gen = np.random.default_rng(seed)
    logits = gen.normal(scale=3, size=(2, 3, V))
    tg = gen.integers(0, V, size=(2, 3))
    lsm = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
    ref = -np.take_along_axis(lsm, tg[..., None], -1).mean()
    assert abs(LS.cross_entropy(Tensor(logits), tg).item() - ref) < 1e-7


def test_ce_gradient():
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 5)), requires_grad=True)
    rep = T.grad_check(lambda: LS.cross_entropy(x, [[1, 2, -1], [0, 4, 3]], smoothing=0.1), [x])
    assert rep.passed, str(rep)


# -- CTC ----------------------------------------------------------------------------

def test_ctc_single_frame_uniform():
    V = 5
    lp = np.full((1, V + 1), -math.log(V + 1))
    assert LS.ctc_loss(Tensor(lp), [3]).item() == pytest.approx(math.log(V + 1), abs=1e-12)


def test_ctc_three_frames_matches_brute_force():
    lp = log_probs(3, 4, seed=7)
    assert abs(LS.ctc_loss(Tensor(lp), [1, 2]).item() - ctc_brute(lp, [1, 2])) < 1e-8


@pytest.mark.parametrize("Tn,target", [(2, [1, 1]), (1, [1, 2]), (4, [2, 2, 2])])
def test_ctc_infeasible(Tn, target):
    with pytest.raises(CTCInfeasibleError):
        LS.ctc_loss(Tensor(log_probs(Tn, 3)), target)


def test_ctc_rejects_blank_in_target():
    with pytest.raises(ContractError):
        LS.ctc_loss(Tensor(log_probs(3, 3)), [0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 4), st.data())
def test_ctc_property_against_brute_force(seed, Tn, C, data):
    L = data.draw(st.integers(0, min(3, Tn)))
    target = data.draw(st.lists(st.integers(1, C - 1), min_size=L, max_size=L))
    lp = log_probs(Tn, C, seed)
    ref = ctc_brute(lp, target)
    if not np.isfinite(ref):
        with pytest.raises(CTCInfeasibleError):
            LS.ctc_loss(Tensor(lp), target)
    else:
        assert abs(LS.ctc_loss(Tensor(lp), target).item() - ref) < 1e-8


def test_ctc_batch_padding_matches_single():
    a, b = log_probs(5, 4, 1), log_probs(3, 4, 2)
    batch = np.zeros((2, 5, 4))
    batch[0], batch[1, :3] = a, b
    batch[1, 3:] = log_probs(2, 4, 9)
    got = LS.ctc_loss_batch(Tensor(batch), [5, 3], [[1, 2, 2], [3]], reduction="sum").item()
    ref = ctc_brute(a, [1, 2, 2]) + ctc_brute(b, [3])
    assert got == pytest.approx(ref, abs=1e-10)


def test_ctc_gradient_through_log_softmax():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 6, 4)), requires_grad=True)
    rep = T.grad_check(lambda: LS.ctc_loss_batch(T.log_softmax(x, -1), [6, 4], [[1, 2, 1], [3, 3]]), [x])
    assert rep.passed, str(rep)


def test_ctc_gradient_raw_log_probs():
    x = Tensor(log_probs(5, 3, 5), requires_grad=True)
    rep = T.grad_check(lambda: LS.ctc_loss(x, [1, 2]), [x])
    assert rep.passed, str(rep)


# -- greedy decoding ----------------------------------------------------------------

def onehot(path, C):
    m = np.full((len(path), C), -10.0)
    m[np.arange(len(path)), path] = 0.0
    return m


@pytest.mark.parametrize("path,expected", [([0, 1, 1, 0, 2], [1, 2]), ([0, 0, 0], []), ([1, 0, 1], [1, 1])])
def test_greedy_decode_examples(path, expected):
    assert LS.ctc_greedy_decode(onehot(path, 3)) == expected


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 4), max_size=6), st.data())
def test_greedy_decode_inverts_valid_alignment(y, data):
    path = []
    for i, k in enumerate(y):
        path += [0] * data.draw(st.integers(0 if i == 0 or y[i - 1] != k else 1, 2))
        path += [k] * data.draw(st.integers(1, 3))
    path += [0] * data.draw(st.integers(0, 2))
    assert LS.ctc_greedy_decode(onehot(path, 5)) == y


# -- joint loss ----------------------------------------------------------------------

def test_joint_loss_examples():
    ce, ctc = Tensor(np.array(2.0)), Tensor(np.array(4.0))
    assert LS.joint_loss(ce, ctc, 0.0) is ce
    assert LS.joint_loss(ce, ctc, 1.0) is ctc
    assert LS.joint_loss(ce, ctc, 0.3).item() == pytest.approx(2.6, abs=1e-15)
    with pytest.raises(ConfigError):
        LS.joint_loss(ce, ctc, 1.2)


@given(st.floats(0, 1), st.floats(-50, 50), st.floats(-50, 50))
def test_joint_loss_affine(lam, ce, ctc):
    got = LS.joint_loss(ce, ctc, lam)
    assert got == pytest.approx(lam * ctc + (1 - lam) * ce, abs=1e-12)


# -- phase sensitive masks --------------------------------------------------------

def cplx(shape, seed):
    g = np.random.default_rng(seed)
    return g.normal(size=shape) + 1j * g.normal(size=shape)


def test_psm_single_source_is_one():
    mix = cplx((4, 5), 0)
    mix[0, 0] = 0
    m = LS.psm_target(mix[None], mix)
    assert m[0, 0, 0] == 0.0
    np.testing.assert_allclose(m[0].ravel()[1:], 1.0, atol=1e-15)


def test_psm_quadrature_source_is_zero():
    mix = cplx((3, 3), 1)
    np.testing.assert_allclose(LS.psm_target((1j * mix)[None], mix), 0.0, atol=1e-15)


def test_psm_direct_formula():
    s = cplx((2, 4, 6), 2)
    mix = s.sum(0)
    direct = np.abs(s) * np.cos(np.angle(s) - np.angle(mix)[None]) / np.abs(mix)[None]
    np.testing.assert_allclose(LS.psm_target(s, mix), np.clip(direct, 0, 1), atol=1e-12)
    np.testing.assert_allclose(LS.psm_target(s, mix, clamp_max=5.0), np.clip(direct, 0, 5), atol=1e-12)


# -- uPIT --------------------------------------------------------------------------

def upit_brute(est, mix, tgt):
    S = est.shape[0]
    vals = {}
    for p in itertools.permutations(range(S)):
        vals[p] = np.mean([np.mean((est[p[s]] * mix - tgt[s] * mix) ** 2) for s in range(S)])
    return vals


def test_upit_swapped_estimates_choose_swap():
    g = np.random.default_rng(0)
    tgt, mix = g.random((2, 4, 5)), g.random((4, 5))
    r = LS.upit_loss(Tensor(tgt[::-1].copy()), mix, tgt)
    assert r.total.item() == 0.0
    assert r.terms["chosen_permutation"] == (1, 0)


@pytest.mark.parametrize("S", [2, 3])
def test_upit_matches_enumeration(S):
    g = np.random.default_rng(S)
    est, tgt, mix = g.random((S, 3, 4)), g.random((S, 3, 4)), g.random((3, 4))
    r = LS.upit_loss(Tensor(est), mix, tgt)
    ref = upit_brute(est, mix, tgt)
    assert abs(r.total.item() - min(ref.values())) < 1e-10
    for p, v in ref.items():
        assert abs(r.terms["per_perm_losses"][p] - v) < 1e-10


def test_upit_tie_breaks_to_first_permutation():
    g = np.random.default_rng(1)
    t = g.random((3, 4))
    r = LS.upit_loss(Tensor(g.random((2, 3, 4))), g.random((3, 4)), np.stack([t, t]))
    vals = list(r.terms["per_perm_losses"].values())
    assert vals[0] == vals[1]
    assert r.terms["chosen_permutation"] == (0, 1)


def test_upit_too_many_speakers():
    with pytest.raises(ConfigError):
        LS.upit_loss(Tensor(np.zeros((5, 2, 2))), np.ones((2, 2)), np.zeros((5, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 3), st.data())
def test_upit_invariant_to_estimate_order(seed, S, data):
    g = np.random.default_rng(seed)
    est, tgt, mix = g.random((S, 3, 4)), g.random((S, 3, 4)), g.random((3, 4))
    perm = data.draw(st.permutations(range(S)))
    a = LS.upit_loss(Tensor(est), mix, tgt).total.item()
    b = LS.upit_loss(Tensor(est[list(perm)]), mix, tgt).total.item()
    assert a == b


def test_upit_batch_respects_lengths_and_gradient():
    g = np.random.default_rng(5)
    est = Tensor(g.random((2, 2, 5, 3)), requires_grad=True)
    mix, tgt = g.random((2, 5, 3)), g.random((2, 2, 5, 3))
    r = LS.upit_loss_batch(est, mix, tgt, [5, 3])
    ref = (min(upit_brute(est.data[0], mix[0], tgt[0]).values())
           + min(upit_brute(est.data[1, :, :3], mix[1, :3], tgt[1, :, :3]).values())) / 2
    assert r.total.item() == pytest.approx(ref, abs=1e-12)
    rep = T.grad_check(lambda: LS.upit_loss_batch(est, mix, tgt, [5, 3]).total, [est])
    assert rep.passed, str(rep)


# -- TTS -----------------------------------------------------------------------------

def test_tts_loss_perfect_prediction():
    feats = np.random.default_rng(0).normal(size=(1, 4, 3))
    d = np.array([[1, 3]])
    r = LS.tts_loss(Tensor(feats), feats, Tensor(np.log(d + 1.0)), d)
    assert r.total.item() == 0.0


def test_tts_loss_constant_offset():
    feats = np.random.default_rng(0).normal(size=(1, 4, 3))
    d = np.array([[1, 3]])
    r = LS.tts_loss(Tensor(feats + 0.25), feats, Tensor(np.log(d + 1.0)), d)
    assert r.terms["l1"] == pytest.approx(0.25, abs=1e-14)
    assert r.terms["dur_mse"] == 0.0


def test_tts_loss_hand_computation_with_masks():
    g = np.random.default_rng(3)
    pred, tgt = g.normal(size=(2, 4, 2)), g.normal(size=(2, 4, 2))
    dlog, dur = g.normal(size=(2, 3)), np.array([[1, 2, 1], [2, 2, 0]])
    fl, tl = [4, 4], [3, 2]
    l1 = np.abs(pred - tgt).mean()
    sq = [(dlog[0, i] - math.log(dur[0, i] + 1)) ** 2 for i in range(3)]
    sq += [(dlog[1, i] - math.log(dur[1, i] + 1)) ** 2 for i in range(2)]
    r = LS.tts_loss(Tensor(pred), tgt, Tensor(dlog), dur, fl, tl, dur_weight=0.5)
    assert r.terms["l1"] == pytest.approx(l1, abs=1e-12)
    assert r.terms["dur_mse"] == pytest.approx(sum(sq) / 5, abs=1e-12)
    assert r.total.item() == pytest.approx(l1 + 0.5 * sum(sq) / 5, abs=1e-12)
    pred2 = pred.copy()
    pred2[1, 3:] += 100.0
    short = LS.tts_loss(Tensor(pred2), tgt, Tensor(dlog), dur, [4, 3], tl)
    l1_short = (np.abs(pred - tgt)[0].sum() + np.abs(pred - tgt)[1, :3].sum()) / (7 * 2)
    assert short.terms["l1"] == pytest.approx(l1_short, abs=1e-12)


def test_tts_loss_shape_mismatch():
    with pytest.raises(ContractError):
        LS.tts_loss(Tensor(np.zeros((1, 3, 2))), np.zeros((1, 4, 2)), Tensor(np.zeros((1, 2))), [[1, 2]])
