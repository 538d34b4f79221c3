"""Optimisation, schedules, augmentation and checkpoint handling."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError
from .params import ParamStore

RECOMMENDED_LR_COEFFICIENTS = (1, 2, 5, 10)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: ParamStore) -> None:
        for name, t in params.trainable().items():
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            elif self.m[name].shape != t.shape:
                raise ContractError(f"optimizer moment for {name} has shape {self.m[name].shape}, "
                                    f"parameter has {t.shape}")


def adam_step(params: ParamStore, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    state.ensure(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.trainable().items():
        if t.grad is None:
            raise ContractError(f"no gradient for {name}; run backward first")
        g = t.grad
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        t.data = (t.data - update).astype(t.dtype)


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

def noam_lr(step: int, d_att: int, warmup: int, coefficient: float = 1.0) -> float:
    """``coefficient * d_att^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ContractError("noam_lr is defined for step >= 1")
    if warmup < 1:
        raise ConfigError("warmup must be >= 1", "warmup_steps")
    return coefficient * d_att ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def onecycle_lr(step: int, total: int, max_lr: float, pct_start: float = 0.3,
                final_div: float = 1e4) -> float:
    """Linear warm-up to ``max_lr`` then cosine annealing to ``max_lr / final_div``."""
    if not 1 <= step <= total:
        raise ContractError(f"onecycle_lr needs 1 <= step <= total, got step={step}, total={total}")
    ramp = max(1, int(round(pct_start * total)))
    if ramp >= total:
        raise ConfigError("total_steps must exceed the warm-up length", "total_steps")
    if step <= ramp:
        return max_lr * step / ramp
    low = max_lr / final_div
    progress = (step - ramp) / (total - ramp)
    return low + (max_lr - low) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class SchedulerConfig:
    kind: str = "noam"
    lr_coefficient: float = 1.0
    warmup_steps: int = 25000
    total_steps: int = 0
    d_att: int = 256
    max_lr: float = 1e-3
    pct_start: float = 0.3
    final_div: float = 1e4

    def validate(self) -> "SchedulerConfig":
        if self.kind not in ("noam", "onecycle"):
            raise ConfigError(f"unknown scheduler {self.kind!r}", "kind")
        if self.warmup_steps < 1:
            raise ConfigError("must be >= 1", "warmup_steps")
        if self.kind == "onecycle" and self.total_steps <= max(1, int(round(self.pct_start * self.total_steps))):
            raise ConfigError("onecycle needs total_steps greater than the warm-up", "total_steps")
        return self

    def lr(self, step: int) -> float:
        if self.kind == "noam":
            return noam_lr(step, self.d_att, self.warmup_steps, self.lr_coefficient)
        return onecycle_lr(step, self.total_steps, self.max_lr * self.lr_coefficient,
                           self.pct_start, self.final_div)


# ---------------------------------------------------------------------------
# gradient clipping
# ---------------------------------------------------------------------------

def global_grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            g = t.grad.astype(np.float64)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the scale factor that was applied (1.0 when nothing changed).
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive", "grad_clip")
    tensors = list(params.trainable().values()) if hasattr(params, "trainable") else list(params)
    norm = global_grad_norm(tensors)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for t in tensors:
        if t.grad is not None:
            t.grad = (t.grad * scale).astype(t.grad.dtype)
    return scale


# ---------------------------------------------------------------------------
# SpecAugment (time / frequency masking, no warping)
# ---------------------------------------------------------------------------

def spec_augment(feats, time_masks: int, freq_masks: int, time_width: int, freq_width: int,
                 rng, lengths=None) -> np.ndarray:
    """Zero ``time_masks`` bands of ``time_width`` frames and ``freq_masks``
    bands of ``freq_width`` bins in each sequence of ``feats: [B, T, F]``.

    Band positions are drawn per sequence from ``rng``; bands never reach
    into padding when ``lengths`` is given.
    """
    x = np.array(feats, copy=True)
    B, T_len, F = x.shape
    if time_masks and time_width >= T_len:
        raise ConfigError(f"time mask width {time_width} must be < T={T_len}", "time_width")
    if freq_masks and freq_width >= F:
        raise ConfigError(f"freq mask width {freq_width} must be < F={F}", "freq_width")
    if not time_masks and not freq_masks:
        return x
    gen = rng.generator()
    lengths = np.full(B, T_len) if lengths is None else np.asarray(lengths)
    for b in range(B):
        for _ in range(freq_masks):
            f0 = int(gen.integers(0, F - freq_width + 1))
            x[b, :, f0:f0 + freq_width] = 0
        n = int(lengths[b])
        for _ in range(time_masks):
            if time_width >= n:
                continue
            t0 = int(gen.integers(0, n - time_width + 1))
            x[b, t0:t0 + time_width, :] = 0
    return x


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CFMR"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamStore
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    metric: float = float("nan")
    version: int = FORMAT_VERSION


def _write_tensors(fh, tensors: dict) -> None:
    fh.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_tensors(fh) -> dict:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = arr
    return out


def optimizer_tensors(state: OptimizerState | None) -> dict:
    if state is None:
        return {}
    out = {}
    for name in state.m:
        out[f"m.{name}"] = state.m[name]
        out[f"v.{name}"] = state.v[name]
    return out


def optimizer_from_tensors(tensors: dict, step: int, **hyper) -> OptimizerState:
    state = OptimizerState(step=step, **hyper)
    for key, arr in tensors.items():
        kind, _, name = key.partition(".")
        if kind == "m":
            state.m[name] = np.array(arr)
        elif kind == "v":
            state.v[name] = np.array(arr)
        else:
            raise CheckpointError(f"unexpected optimizer tensor {key!r}")
    return state


def save_checkpoint(path, params: ParamStore, optimizer: OptimizerState | dict | None = None,
                    step: int = 0, metric: float = float("nan")) -> None:
    """Little-endian ``CFMR`` container: params, optimizer moments, footer."""
    opt = optimizer if isinstance(optimizer, dict) else optimizer_tensors(optimizer)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_tensors(fh, {k: v.data for k, v in params.items()})
        _write_tensors(fh, opt)
        fh.write(struct.pack("<Qd", int(step), float(metric)))
    os.replace(tmp, path)


BUFFER_SUFFIXES = (".running_mean", ".running_var")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a CFMR checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        tensors = _read_tensors(fh)
        opt = _read_tensors(fh)
        step, metric = struct.unpack("<Qd", _read_exact(fh, 16))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after footer")
    store = ParamStore()
    for name, arr in tensors.items():
        store.add(name, arr, trainable=not name.endswith(BUFFER_SUFFIXES))
    return Checkpoint(store, opt, int(step), float(metric), version)


def average_checkpoints(paths) -> Checkpoint:
    """Element-wise mean of every tensor (parameters and BN statistics).

    Step, metric and optimizer state come from the newest checkpoint (the
    one with the largest step).
    """
    paths = list(paths)
    if not paths:
        raise ContractError("average_checkpoints needs at least one checkpoint")
    ckpts = [load_checkpoint(p) for p in paths]
    ref = ckpts[0].params
    sums = {k: np.zeros(v.shape, dtype=np.float64) for k, v in ref.items()}
    for path, ck in zip(paths, ckpts):
        if set(ck.params) != set(ref):
            diff = sorted(set(ck.params) ^ set(ref))
            raise CheckpointError(f"{path}: parameter names differ from {paths[0]}: {', '.join(diff)}")
        for k, v in ck.params.items():
            if v.shape != ref[k].shape:
                raise CheckpointError(f"{path}: tensor {k} has shape {v.shape}, expected {ref[k].shape}")
            sums[k] += v.data
    newest = max(ckpts, key=lambda c: c.step)
    out = ParamStore()
    n = len(ckpts)
    for k, v in ref.items():
        out.add(k, (sums[k] / n).astype(v.dtype), trainable=v.requires_grad)
    return Checkpoint(out, newest.optimizer, newest.step, newest.metric)


def select_n_best(history, n: int) -> list[int]:
    """Steps of the ``n`` entries with the lowest metric; later step wins ties."""
    ranked = sorted(history, key=lambda sm: (sm[1], -sm[0]))
    return [step for step, _ in ranked[:n]]
