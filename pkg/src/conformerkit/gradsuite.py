"""Finite-difference gradient checks for every parameterised module.

Each case builds a tiny float64 instance of one module with all parameters
(biases and relative-position biases included) perturbed away from their
initial values, projects the output onto a fixed random tensor and compares
the backward pass against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as MD
from . import nn
from . import tensor as T
from .params import ParamStore
from .rng import RNG

TINY = dict(d_att=8, d_ff=12, heads=2, kernel=3, dropout=0.0, enc_blocks=1, dec_blocks=1,
            vocab=4, feat_dim=9, subsample_channels=3, tts_out_dim=5, ln_eps=1e-5)


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<20s} max_rel_err={self.max_rel_error:.2e} ({self.seconds:.2f}s)"


def _jitter(store: ParamStore, seed: int) -> ParamStore:
    gen = RNG(seed).child("jitter").generator()
    for name, t in store.items():
        if t.requires_grad:
            t.data = t.data + 0.3 * gen.normal(size=t.shape)
        elif name.endswith("running_var"):
            t.data = 0.5 + gen.random(size=t.shape)
        else:
            t.data = 0.1 * gen.normal(size=t.shape)
    return store


def _probe(shape, seed):
    return RNG(seed).child("probe").generator().normal(size=shape)


def _objective(out, seed):
    w = _probe(out.shape, seed)
    return (out * w).sum()


def _tiny(task="asr", **extra):
    return MD.ModelConfig(task=task, **{**TINY, **extra}).validate()


def _store(seed=0):
    return RNG(seed).child("case")


def case_mhsa(seed=0):
    store = ParamStore()
    nn.init_mhsa(store.scope("m"), 8, 2, _store(seed), np.float64)
    _jitter(store, seed)
    x = T.Tensor(_probe((2, 5, 8), seed + 1), requires_grad=True)
    mask = MD.length_mask([5, 3], 5)[:, None, None, :]
    rel = nn.rel_pos_table(5, 8, np.float64)
    return (lambda: _objective(nn.mhsa(x, store.scope("m"), 2, mask, rel), seed)), [x, *store.trainable().values()]


def case_conv_module(seed=0, mode="train"):
    store = ParamStore()
    nn.init_conv_module(store.scope("c"), 4, 3, _store(seed), np.float64)
    _jitter(store, seed)
    x = T.Tensor(_probe((2, 6, 4), seed + 1), requires_grad=True)
    fm = MD.length_mask([6, 4], 6)
    mean0 = store["c.bn.running_mean"].data.copy()
    var0 = store["c.bn.running_var"].data.copy()

    def f():
        # restore BN statistics so repeated calls see the same state
        store["c.bn.running_mean"].data[...] = mean0
        store["c.bn.running_var"].data[...] = var0
        return _objective(nn.conv_module(x, store.scope("c"), mode, fm), seed)

    return f, [x, *store.trainable().values()]


def case_ffn(seed=0):
    store = ParamStore()
    nn.init_ffn(store.scope("f"), 8, 12, _store(seed), np.float64)
    _jitter(store, seed)
    x = T.Tensor(_probe((2, 4, 8), seed + 1), requires_grad=True)
    return (lambda: _objective(nn.ffn(x, store.scope("f")), seed)), [x, *store.trainable().values()]


def case_conformer_block(seed=0):
    cfg = _tiny()
    store = ParamStore()
    MD.init_conformer_block(store.scope("b"), cfg, _store(seed), np.float64)
    _jitter(store, seed)
    x = T.Tensor(_probe((2, 5, 8), seed + 1), requires_grad=True)
    fm = MD.length_mask([5, 4], 5)
    mean0 = {k: t.data.copy() for k, t in store.buffers().items()}

    def f():
        for k, v in mean0.items():
            store[k].data[...] = v
        out = MD.conformer_block(x, store.scope("b"), cfg, fm[:, None, None, :], fm, mode="train")
        return _objective(out, seed)

    return f, [x, *store.trainable().values()]


def case_subsampler(seed=0):
    store = ParamStore()
    nn.init_subsampler(store.scope("s"), 9, 8, _store(seed), channels=3, dtype=np.float64)
    _jitter(store, seed)
    x = T.Tensor(_probe((2, 8, 9), seed + 1), requires_grad=True)
    return (lambda: _objective(nn.subsample(x, [8, 7], store.scope("s"))[0], seed)), \
        [x, *store.trainable().values()]


def case_decoder_block(seed=0):
    cfg = _tiny()
    store = MD.build_model(cfg, seed, np.float64)
    _jitter(store, seed)
    enc = T.Tensor(_probe((2, 4, 8), seed + 1), requires_grad=True)
    ys = np.array([[cfg.sos, 1, 2], [cfg.sos, 3, cfg.eos]])
    names = [k for k in store.trainable() if k.startswith("dec.")]

    def f():
        return _objective(MD.decoder_forward(ys, enc, [4, 3], store, cfg), seed)

    return f, [enc, *(store[k] for k in names)]


def case_duration_predictor(seed=0):
    cfg = _tiny("tts")
    store = MD.build_model(cfg, seed, np.float64)
    _jitter(store, seed)
    h = T.Tensor(_probe((2, 5, 8), seed + 1), requires_grad=True)
    tm = MD.length_mask([5, 3], 5)
    names = [k for k in store.trainable() if k.startswith("dur.")]
    return (lambda: _objective(MD.duration_predictor(h, tm, store, cfg), seed)), \
        [h, *(store[k] for k in names)]


def case_mask_head(seed=0):
    cfg = _tiny("ss", feat_dim=6, ss_speakers=2)
    store = MD.build_model(cfg, seed, np.float64)
    _jitter(store, seed)
    mag = np.abs(_probe((2, 4, 6), seed + 1)) + 0.1

    def f():
        return _objective(MD.ss_forward(mag, [4, 3], store, cfg), seed)

    return f, list(store.trainable().values())


CASES = {
    "mhsa_relpos": case_mhsa,
    "conv_module_train": lambda seed=0: case_conv_module(seed, "train"),
    "conv_module_eval": lambda seed=0: case_conv_module(seed, "eval"),
    "ffn": case_ffn,
    "conformer_block": case_conformer_block,
    "subsampler": case_subsampler,
    "decoder_block": case_decoder_block,
    "duration_predictor": case_duration_predictor,
    "mask_head": case_mask_head,
}


def run_suite(names=None, tol: float = 1e-4, eps: float = 1e-6, seed: int = 0,
              max_coords: int | None = 24) -> list[CaseResult]:
    """Run the selected cases (all by default) and return one result each."""
    results = []
    for name in names or CASES:
        t0 = time.perf_counter()
        f, params = CASES[name](seed)
        rep = T.grad_check(f, params, eps=eps, tol=tol, max_coords=max_coords, seed=seed)
        results.append(CaseResult(name, rep.max_rel_error, time.perf_counter() - t0, tol))
    return results
