"""Evaluation metrics: edit distance / error rates, SDR and MCD with DTW."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import ContractError

SDR_CAP = 99.9
MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)


class EditResult(NamedTuple):
    distance: int
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def rate(self) -> float:
        """``distance / len(ref)``; ``inf`` for an empty reference with errors."""
        if self.ref_len == 0:
            return 0.0 if self.distance == 0 else math.inf
        return self.distance / self.ref_len


def edit_distance(hyp, ref) -> EditResult:
    """Unit-cost Levenshtein distance with S/D/I counts from the backtrace."""
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            D[i, j] = min(sub, D[i - 1, j] + 1, D[i, j - 1] + 1)
    i, j = n, m
    s = d = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditResult(int(D[n, m]), int(s), d, ins, n)


def error_rate(hyps, refs) -> float:
    """Corpus-level rate: total edits over total reference length."""
    dist = sum(edit_distance(h, r).distance for h, r in zip(hyps, refs))
    total = sum(len(r) for r in refs)
    if total == 0:
        return 0.0 if dist == 0 else math.inf
    return dist / total


def split_words(tokens, separator: int):
    words, cur = [], []
    for t in tokens:
        if t == separator:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    if cur:
        words.append(tuple(cur))
    return words


def sdr(estimate, reference) -> float:
    """``10 log10(|s|^2 / |s - s_hat|^2)`` in dB, clipped to +-99.9."""
    est = np.asarray(estimate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ContractError(f"sdr: length mismatch {est.shape} vs {ref.shape}")
    num = float(np.dot(ref, ref))
    if num == 0.0:
        raise ContractError("sdr: reference signal is all zeros")
    den = float(np.dot(ref - est, ref - est))
    if den == 0.0:
        return SDR_CAP
    return float(np.clip(10.0 * math.log10(num / den), -SDR_CAP, SDR_CAP))


def dtw_path(a: np.ndarray, b: np.ndarray):
    """Minimum-cost monotone alignment under Euclidean frame distance.

    Returns ``(path, local)`` with ``path`` a list of ``(i, j)`` pairs and
    ``local`` the ``[len(a), len(b)]`` distance matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    local = np.sqrt((diff * diff).sum(-1))
    n, m = local.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        li = local[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = li[j - 1] + best
    path = []
    i, j = n, m
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        steps = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(steps, key=lambda s: s[0])
    path.reverse()
    return path, local


def mcd_dtw(pred, ref, include_c0: bool = False) -> float:
    """Mel-cepstral distortion in dB after DTW alignment.

    ``pred: [T1, D]`` and ``ref: [T2, D]``; coefficient 0 is dropped unless
    ``include_c0``.  The result is ``10 sqrt(2) / ln 10`` times the mean
    Euclidean distance along the optimal path.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.ndim != 2 or ref.ndim != 2 or pred.shape[1] != ref.shape[1] or pred.shape[1] < 1:
        raise ContractError(f"mcd_dtw: incompatible shapes {pred.shape} / {ref.shape}")
    if not include_c0:
        if pred.shape[1] < 2:
            raise ContractError("mcd_dtw: excluding c0 leaves no coefficients")
        pred, ref = pred[:, 1:], ref[:, 1:]
    path, local = dtw_path(pred, ref)
    return MCD_CONST * float(np.mean([local[i, j] for i, j in path]))
