"""Training objectives and label-side transforms."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, CTCInfeasibleError
from .tensor import Tensor, _result

BLANK = 0


@dataclass
class LossReport:
    """Scalar objective plus its named components (plain floats)."""

    total: Tensor
    terms: dict = field(default_factory=dict)

    def value(self) -> float:
        return self.total.item()


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, pad_id: int = -1, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed CE averaged over non-pad positions.

    Per position the loss is ``(1 - eps) * nll(target) + eps * mean_c nll(c)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    valid = targets != pad_id
    n = int(valid.sum())
    if n == 0:
        raise ContractError("cross_entropy: every position is padding")
    if np.any(targets[valid] < 0) or np.any(targets[valid] >= V):
        raise ContractError(f"cross_entropy: targets must lie in [0, {V})")
    lp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(lp.shape, dtype=lp.dtype)
    safe = np.where(valid, targets, 0)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    weights = (1.0 - smoothing) * onehot + smoothing / V
    weights *= valid[..., None]
    return -(lp * weights).sum() * (1.0 / n)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def _logsumexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(log_probs: np.ndarray, input_lengths, targets, target_lengths):
    """Log-domain CTC over a padded batch.

    ``log_probs`` is ``[B, T, C]``, ``targets`` ``[B, L]`` (padded, no
    blanks).  Returns ``(nll [B], grad [B, T, C])`` with ``grad`` the
    derivative of each sequence's negative log-likelihood with respect to
    ``log_probs``.  Infeasible sequences get ``nll = inf``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T_max, C = lp.shape
    in_len = np.asarray(input_lengths, dtype=np.int64)
    tgt_len = np.asarray(target_lengths, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64).reshape(B, -1)
    S = 2 * (targets.shape[1] if targets.size else 0) + 1
    ext = np.full((B, S), BLANK, dtype=np.int64)
    if S > 1:
        ext[:, 1::2] = targets
    s_idx = np.arange(S)
    s_len = 2 * tgt_len + 1
    live = s_idx[None, :] < s_len[:, None]
    prev2 = np.full((B, S), BLANK, dtype=np.int64)
    prev2[:, 2:] = ext[:, :-2]
    skip = (ext != BLANK) & (ext != prev2) & (s_idx[None, :] >= 2)
    neg = -np.inf
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T_max, S)), axis=2)
    emit = np.where(live[:, None, :], emit, neg)

    alpha = np.full((B, T_max, S), neg)
    first = np.full((B, S), neg)
    first[:, 0] = emit[:, 0, 0]
    if S > 1:
        first[:, 1] = np.where(tgt_len > 0, emit[:, 0, 1], neg)
    alpha[:, 0] = first
    with np.errstate(invalid="ignore"):
        for t in range(1, T_max):
            a = alpha[:, t - 1]
            a1 = np.concatenate([np.full((B, 1), neg), a[:, :-1]], axis=1)
            a2 = np.where(skip, np.concatenate([np.full((B, 2), neg), a[:, :-2]], axis=1), neg)
            nxt = _logsumexp3(a, a1, a2) + emit[:, t]
            alpha[:, t] = np.where((t < in_len)[:, None], nxt, a)

        bidx = np.arange(B)
        last = np.maximum(in_len - 1, 0)
        a_last = alpha[bidx, last]
        end1 = a_last[bidx, s_len - 1]
        end2 = np.where(tgt_len > 0, a_last[bidx, np.maximum(s_len - 2, 0)], neg)
        log_p = np.logaddexp(end1, end2)
        log_p = np.where(in_len > 0, log_p, neg)

        # beta_t(s): log-prob of emitting the remaining frames after t from state s
        terminal = np.full((B, S), neg)
        terminal[bidx, s_len - 1] = 0.0
        terminal[bidx, np.maximum(s_len - 2, 0)] = np.where(tgt_len > 0, 0.0, terminal[bidx, np.maximum(s_len - 2, 0)])
        beta = np.full((B, T_max, S), neg)
        beta[:, T_max - 1] = terminal
        skip_next = np.concatenate([skip[:, 2:], np.zeros((B, 2), dtype=bool)], axis=1)
        for t in range(T_max - 2, -1, -1):
            be = beta[:, t + 1] + emit[:, t + 1]
            b1 = np.concatenate([be[:, 1:], np.full((B, 1), neg)], axis=1)
            b2 = np.where(skip_next, np.concatenate([be[:, 2:], np.full((B, 2), neg)], axis=1), neg)
            rec = _logsumexp3(be, b1, b2)
            beta[:, t] = np.where((t >= in_len - 1)[:, None], terminal, rec)

        feasible = np.isfinite(log_p)
        occ = np.exp(alpha + beta - np.where(feasible, log_p, 0.0)[:, None, None])
    occ = np.where(np.isfinite(occ) & feasible[:, None, None], occ, 0.0)
    occ *= (np.arange(T_max)[None, :] < in_len[:, None])[:, :, None]
    grad = np.zeros((B, T_max, C))
    bb, tt, ss = np.meshgrid(np.arange(B), np.arange(T_max), np.arange(S), indexing="ij")
    np.add.at(grad, (bb, tt, ext[bb, ss]), -occ)
    return -log_p, grad


def ctc_loss_batch(log_probs: Tensor, input_lengths, targets, target_lengths=None,
                   reduction: str = "mean") -> Tensor:
    """CTC negative log-likelihood over a padded batch (mean over sequences).

    ``targets`` may be a list of token sequences or a padded array with
    ``target_lengths``.  Raises :class:`CTCInfeasibleError` when a target
    cannot be aligned to its number of frames.
    """
    if target_lengths is None:
        seqs = [np.asarray(t, dtype=np.int64) for t in targets]
        target_lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        L = max(1, int(target_lengths.max(initial=0)))
        padded = np.zeros((len(seqs), L), dtype=np.int64)
        for i, s in enumerate(seqs):
            padded[i, : len(s)] = s
        targets = padded
    targets = np.asarray(targets, dtype=np.int64)
    target_lengths = np.asarray(target_lengths, dtype=np.int64)
    mask = np.arange(targets.shape[1])[None, :] < target_lengths[:, None]
    if np.any(targets[mask] == BLANK):
        raise ContractError("CTC targets must not contain the blank id 0")
    if np.any(targets[mask] >= log_probs.shape[-1]):
        raise ContractError("CTC target id exceeds the number of classes")
    nll, grad = ctc_forward_backward(log_probs.data, input_lengths, targets, target_lengths)
    bad = np.nonzero(~np.isfinite(nll))[0]
    if bad.size:
        raise CTCInfeasibleError(f"no CTC alignment for batch entries {bad.tolist()} "
                                 f"(frames {np.asarray(input_lengths)[bad].tolist()}, "
                                 f"target lengths {target_lengths[bad].tolist()})")
    B = nll.shape[0]
    scale = 1.0 / B if reduction == "mean" else 1.0
    dtype = log_probs.dtype
    value = np.asarray(nll.sum() * scale, dtype=dtype)
    g_lp = (grad * scale).astype(dtype)
    return _result(value, (log_probs,), lambda g: (g * g_lp,), "ctc_loss")


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """``-log p(target | log_probs)`` for one sequence, ``log_probs: [T, C]``."""
    log_probs = T.as_tensor(log_probs)
    lp3 = log_probs.reshape(1, *log_probs.shape)
    return ctc_loss_batch(lp3, [log_probs.shape[0]], [list(target)], reduction="sum")


def ctc_greedy_decode(log_probs, blank: int = BLANK) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def joint_loss(ce, ctc, ctc_weight: float):
    """``ctc_weight * ctc + (1 - ctc_weight) * ce``."""
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError(f"ctc weight must lie in [0, 1], got {ctc_weight}", "ctc_weight")
    if ctc_weight == 0.0:
        return ce
    if ctc_weight == 1.0:
        return ctc
    return ctc * ctc_weight + ce * (1.0 - ctc_weight)


# ---------------------------------------------------------------------------
# separation
# ---------------------------------------------------------------------------

def psm_target(sources, mix, clamp_max: float = 1.0) -> np.ndarray:
    """Phase-sensitive masks ``|s| cos(angle(s) - angle(mix)) / |mix|``.

    ``sources`` is ``[S, ...]`` complex, ``mix`` complex.  Bins with zero
    mixture energy get mask 0; values are clamped to ``[0, clamp_max]``.
    """
    sources = np.asarray(sources)
    mix = np.asarray(mix)
    mag = np.abs(mix)
    # Re(s * conj(mix)) / |mix|^2 == |s| cos(dtheta) / |mix|
    num = np.real(sources * np.conj(mix)[None])
    den = mag * mag
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(den[None] > 0, num / np.where(den > 0, den, 1.0)[None], 0.0)
    return np.clip(m, 0.0, clamp_max)


def upit_loss(masks: Tensor, mix_mag, targets, max_speakers: int = 4) -> LossReport:
    """Utterance-level permutation-invariant MSE for one utterance.

    ``masks`` and ``targets`` are ``[S, T, F]``.  For a permutation ``pi`` the
    loss is the mean over targets ``s`` of ``mean((masks[pi[s]] * mix -
    targets[s] * mix)^2)``; the minimum wins, ties go to the
    lexicographically first permutation.
    """
    S = masks.shape[0]
    if S > max_speakers:
        raise ConfigError(f"uPIT enumerates S! permutations; S={S} exceeds {max_speakers}", "ss_speakers")
    mix = np.asarray(mix_mag, dtype=masks.dtype)
    ref = [np.asarray(targets[s], dtype=masks.dtype) * mix for s in range(S)]
    est = [masks[e] * mix for e in range(S)]
    pair = [[((est[e] - ref[s]) ** 2).mean() for e in range(S)] for s in range(S)]
    perms = list(itertools.permutations(range(S)))
    per_perm = []
    for perm in perms:
        acc = pair[0][perm[0]]
        for s in range(1, S):
            acc = acc + pair[s][perm[s]]
        per_perm.append(acc * (1.0 / S))
    values = [float(v.data) for v in per_perm]
    best = int(np.argmin(values))
    return LossReport(per_perm[best], {"upit": values[best], "chosen_permutation": perms[best],
                                       "per_perm_losses": dict(zip(perms, values))})


def upit_loss_batch(masks: Tensor, mix_mag, targets, lengths) -> LossReport:
    """Mean of per-utterance uPIT losses over a padded ``[B, S, T, F]`` batch."""
    B = masks.shape[0]
    total = None
    chosen = []
    for b in range(B):
        n = int(lengths[b])
        r = upit_loss(masks[b, :, :n], np.asarray(mix_mag)[b, :n], np.asarray(targets)[b, :, :n])
        total = r.total if total is None else total + r.total
        chosen.append(r.terms["chosen_permutation"])
    total = total * (1.0 / B)
    return LossReport(total, {"upit": total.item(), "chosen_permutation": chosen})


# ---------------------------------------------------------------------------
# text-to-speech
# ---------------------------------------------------------------------------

def tts_loss(feats_pred: Tensor, feats_target, dur_pred_log: Tensor, dur_target,
             frame_lengths=None, token_lengths=None, dur_weight: float = 1.0) -> LossReport:
    """L1 on valid frames plus ``dur_weight`` times MSE of ``log(d + 1)``."""
    tgt = np.asarray(feats_target, dtype=feats_pred.dtype)
    if tgt.ndim == 2:
        tgt = tgt[None]
    B, Tf, D = feats_pred.shape
    if tgt.shape != feats_pred.shape:
        raise ContractError(f"feature shapes differ: {feats_pred.shape} vs {tgt.shape}")
    fl = np.full(B, Tf) if frame_lengths is None else np.asarray(frame_lengths)
    fmask = (np.arange(Tf)[None, :] < fl[:, None])[..., None]
    l1 = (T.where(fmask, feats_pred - tgt, 0.0).abs()).sum() * (1.0 / (fmask.sum() * D))

    dur = np.asarray(dur_target, dtype=np.float64)
    if dur.ndim == 1:
        dur = dur[None]
    L = dur_pred_log.shape[1]
    tl = np.full(B, L) if token_lengths is None else np.asarray(token_lengths)
    tmask = np.arange(L)[None, :] < tl[:, None]
    log_d = np.log(dur + 1.0).astype(dur_pred_log.dtype)
    mse = (T.where(tmask, dur_pred_log - log_d, 0.0) ** 2).sum() * (1.0 / tmask.sum())
    total = l1 + mse * dur_weight
    return LossReport(total, {"l1": l1.item(), "dur_mse": mse.item()})
