"""Synthetic desk-scale tasks.

* ``copy``: token sequences rendered as frame features, a stand-in for
  recognition/translation corpora.
* ``mixture``: sums of sinusoid sources in disjoint bands, analysed with a
  129-bin STFT (256-point, 50% overlap, 8 kHz).
* ``tts_toy``: token sequences with per-token durations and deterministic
  frame features.

Every generator is a pure function of its :class:`TaskSpec`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError
from .rng import RNG

KINDS = ("copy", "mixture", "tts_toy")

SAMPLE_RATE = 8000
FRAME = 256      # 32 ms at 8 kHz
HOP = 128        # 16 ms
N_BINS = FRAME // 2 + 1


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab: int = 8
    min_len: int = 3
    max_len: int = 10
    feat_dim: int = 16
    n_sources: int = 2
    n_samples: int = 64
    seed: int = 0
    noise: float = 0.05
    frames_per_token: int = 4
    max_duration: int = 5
    seconds: float = 0.5

    def validate(self) -> "TaskSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"must be one of {KINDS}", "kind")
        if self.vocab < 1:
            raise ConfigError("must be >= 1", "vocab")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len", "min_len")
        if self.n_samples < 1:
            raise ConfigError("must be >= 1", "n_samples")
        if self.kind == "mixture" and self.n_sources not in (2, 3):
            raise ConfigError("mixtures need 2 or 3 sources", "n_sources")
        if self.noise < 0:
            raise ConfigError("must be >= 0", "noise")
        if self.frames_per_token < 1:
            raise ConfigError("must be >= 1", "frames_per_token")
        if self.max_duration < 1:
            raise ConfigError("must be >= 1", "max_duration")
        return self

    def replace(self, **changes) -> "TaskSpec":
        return dataclasses.replace(self, **changes)


def _lengths(spec: TaskSpec, rng: RNG) -> np.ndarray:
    return rng.generator().integers(spec.min_len, spec.max_len + 1, size=spec.n_samples)


# ---------------------------------------------------------------------------
# copy task
# ---------------------------------------------------------------------------

@dataclass
class CopyDataset:
    feats: list
    tokens: list
    spec: TaskSpec = field(default_factory=TaskSpec)

    def __len__(self):
        return len(self.tokens)


def token_patterns(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-token frame pattern ``[vocab + 1, F]`` and the token-onset marker ``[F]``."""
    gen = RNG(spec.seed).child("copy", "patterns").generator()
    patterns = gen.normal(0.0, 1.0, size=(spec.vocab + 1, spec.feat_dim))
    onset = gen.normal(0.0, 1.0, size=spec.feat_dim)
    return patterns, onset


def render_tokens(tokens, spec: TaskSpec) -> np.ndarray:
    """Noise-free features: each token's pattern repeated ``frames_per_token``
    times, with the onset marker added on its first frame."""
    patterns, onset = token_patterns(spec)
    k = spec.frames_per_token
    block = np.repeat(patterns[np.asarray(tokens)], k, axis=0)
    block[::k] += onset
    return block


def gen_copy_task(spec: TaskSpec) -> CopyDataset:
    spec = spec.validate()
    root = RNG(spec.seed).child("copy")
    lengths = _lengths(spec, root.child("lengths"))
    feats, tokens = [], []
    for i, n in enumerate(lengths):
        toks = root.child("tokens", i).generator().integers(1, spec.vocab + 1, size=n)
        x = render_tokens(toks, spec)
        if spec.noise:
            x = x + spec.noise * root.child("noise", i).generator().normal(size=x.shape)
        feats.append(x.astype(np.float32))
        tokens.append(toks.astype(np.int64))
    return CopyDataset(feats, tokens, spec)


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------

def stft(x: np.ndarray) -> np.ndarray:
    """Complex spectrogram ``[frames, 129]`` (Hann window, 32 ms / 16 ms)."""
    _, _, Z = signal.stft(x, fs=SAMPLE_RATE, window="hann", nperseg=FRAME, noverlap=FRAME - HOP,
                          nfft=FRAME)
    return Z.T


def istft(Z: np.ndarray, length: int | None = None) -> np.ndarray:
    _, x = signal.istft(np.asarray(Z).T, fs=SAMPLE_RATE, window="hann", nperseg=FRAME,
                        noverlap=FRAME - HOP, nfft=FRAME)
    if length is not None:
        x = x[:length] if x.size >= length else np.pad(x, (0, length - x.size))
    return x


@dataclass
class MixtureDataset:
    mix_wave: np.ndarray    # [N, n]
    src_wave: np.ndarray    # [N, S, n]
    mix_spec: np.ndarray    # [N, T, F] complex
    src_spec: np.ndarray    # [N, S, T, F] complex
    spec: TaskSpec = field(default_factory=TaskSpec)

    def __len__(self):
        return self.mix_wave.shape[0]

    @property
    def mix_mag(self) -> np.ndarray:
        return np.abs(self.mix_spec).astype(np.float32)


def source_bands(n_sources: int, lo: float = 200.0, hi: float = 3800.0):
    edges = np.linspace(lo, hi, n_sources + 1)
    return list(zip(edges[:-1], edges[1:]))


def gen_mixture_task(spec: TaskSpec) -> MixtureDataset:
    spec = spec.validate()
    root = RNG(spec.seed).child("mixture")
    n = int(round(spec.seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    bands = source_bands(spec.n_sources)
    mix, srcs = [], []
    for i in range(spec.n_samples):
        waves = []
        for s, (lo, hi) in enumerate(bands):
            gen = root.child("source", i, s).generator()
            margin = 0.1 * (hi - lo)
            freqs = gen.uniform(lo + margin, hi - margin, size=3)
            amps = gen.uniform(0.3, 1.0, size=3)
            phases = gen.uniform(0, 2 * np.pi, size=3)
            env = 1.0 + 0.5 * np.sin(2 * np.pi * gen.uniform(1.0, 4.0) * t + gen.uniform(0, 2 * np.pi))
            w = env * (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
            waves.append(w)
        waves = np.stack(waves)
        if spec.noise:
            waves = waves + spec.noise * root.child("noise", i).generator().normal(size=waves.shape)
        srcs.append(waves)
        mix.append(waves.sum(axis=0))
    mix = np.stack(mix)
    srcs = np.stack(srcs)
    mix_spec = np.stack([stft(x) for x in mix])
    src_spec = np.stack([np.stack([stft(x) for x in row]) for row in srcs])
    return MixtureDataset(mix, srcs, mix_spec, src_spec, spec)


# ---------------------------------------------------------------------------
# toy text-to-speech
# ---------------------------------------------------------------------------

@dataclass
class TTSDataset:
    tokens: list
    durations: list
    feats: list
    spec: TaskSpec = field(default_factory=TaskSpec)

    def __len__(self):
        return len(self.tokens)


def tts_frame_table(spec: TaskSpec):
    """Base vector and per-frame slope for every token."""
    gen = RNG(spec.seed).child("tts", "table").generator()
    base = gen.normal(0.0, 1.0, size=(spec.vocab + 1, spec.feat_dim))
    slope = gen.normal(0.0, 0.2, size=(spec.vocab + 1, spec.feat_dim))
    return base, slope


def render_durations(tokens, durations, spec: TaskSpec) -> np.ndarray:
    """Frame ``j`` of token ``k`` is ``base[k] + j * slope[k]``."""
    base, slope = tts_frame_table(spec)
    rows = [base[k] + np.arange(d)[:, None] * slope[k] for k, d in zip(tokens, durations)]
    return np.concatenate(rows, axis=0)


def gen_tts_task(spec: TaskSpec) -> TTSDataset:
    spec = spec.validate()
    root = RNG(spec.seed).child("tts")
    lengths = _lengths(spec, root.child("lengths"))
    tokens, durs, feats = [], [], []
    for i, n in enumerate(lengths):
        gen = root.child("sample", i).generator()
        toks = gen.integers(1, spec.vocab + 1, size=n)
        d = gen.integers(1, spec.max_duration + 1, size=n)
        x = render_durations(toks, d, spec)
        if spec.noise:
            x = x + spec.noise * root.child("noise", i).generator().normal(size=x.shape)
        tokens.append(toks.astype(np.int64))
        durs.append(d.astype(np.int64))
        feats.append(x.astype(np.float32))
    return TTSDataset(tokens, durs, feats, spec)


def generate(spec: TaskSpec):
    spec = spec.validate()
    return {"copy": gen_copy_task, "mixture": gen_mixture_task, "tts_toy": gen_tts_task}[spec.kind](spec)


# ---------------------------------------------------------------------------
# batching and persistence
# ---------------------------------------------------------------------------

def pad_stack(seqs, pad=0.0, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of arrays along their first axis."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    first = np.asarray(seqs[0])
    out = np.full((len(seqs), int(lengths.max()), *first.shape[1:]), pad,
                  dtype=dtype or first.dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def _ragged(prefix, seqs):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    return {f"{prefix}": np.concatenate(seqs, axis=0), f"{prefix}_lengths": lengths}


def _unragged(flat, lengths):
    cuts = np.cumsum(lengths)[:-1]
    return list(np.split(flat, cuts, axis=0))


def save_dataset(path, data) -> None:
    spec = dataclasses.asdict(data.spec)
    meta = {f"spec_{k}": np.asarray(v) for k, v in spec.items()}
    if isinstance(data, CopyDataset):
        arrays = {**_ragged("feats", data.feats), **_ragged("tokens", data.tokens)}
    elif isinstance(data, TTSDataset):
        arrays = {**_ragged("feats", data.feats), **_ragged("tokens", data.tokens),
                  **_ragged("durations", data.durations)}
    else:
        arrays = {"mix_wave": data.mix_wave, "src_wave": data.src_wave,
                  "mix_spec": data.mix_spec, "src_spec": data.src_spec}
    with open(path, "wb") as fh:
        np.savez(fh, **meta, **arrays)


def load_dataset(path):
    with np.load(Path(path), allow_pickle=False) as z:
        fields = {f.name for f in dataclasses.fields(TaskSpec)}
        spec = TaskSpec(**{k[5:]: z[k].item() for k in z.files if k.startswith("spec_") and k[5:] in fields})
        if spec.kind == "copy":
            return CopyDataset(_unragged(z["feats"], z["feats_lengths"]),
                               _unragged(z["tokens"], z["tokens_lengths"]), spec)
        if spec.kind == "tts_toy":
            return TTSDataset(_unragged(z["tokens"], z["tokens_lengths"]),
                              _unragged(z["durations"], z["durations_lengths"]),
                              _unragged(z["feats"], z["feats_lengths"]), spec)
        return MixtureDataset(z["mix_wave"], z["src_wave"], z["mix_spec"], z["src_spec"], spec)
