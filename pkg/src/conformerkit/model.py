"""Model assembly: Conformer blocks, encoder stack, Transformer decoder and
the separation / text-to-speech heads.

Token conventions shared by the recognition/translation models: id 0 is the
CTC blank, ids ``1..vocab`` are real tokens and ``vocab + 1`` doubles as
begin- and end-of-sequence.  Output layers therefore have ``vocab + 2``
classes.  Text-to-speech inputs use ids ``1..vocab`` with 0 as padding.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError
from .params import ParamStore, count_params
from .rng import RNG
from .tensor import Tensor

TASKS = ("asr", "st", "ss", "tts")
RECOMMENDED_KERNELS = (5, 7, 15, 31)


@dataclass
class ModelConfig:
    task: str = "asr"
    enc_blocks: int = 12
    dec_blocks: int = 6
    d_att: int = 256
    d_ff: int = 2048
    dec_d_ff: int | None = None
    heads: int = 4
    kernel: int = 15
    dropout: float = 0.1
    vocab: int = 100
    feat_dim: int = 83
    subsample_channels: int = 256
    encoder_type: str = "conformer"
    ffn_activation: str = "swish"
    attention_scale: str = "model"
    final_norm: bool = True
    ln_eps: float = 1e-12
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    ss_speakers: int = 2
    ss_activation: str = "relu"
    ss_log_input: bool = True
    tts_out_dim: int = 80
    tts_dp_layers: int = 2
    tts_dp_kernel: int = 3
    tts_dp_channels: int | None = None
    tts_dur_weight: float = 1.0

    # -- derived ---------------------------------------------------------
    @property
    def odim(self) -> int:
        return self.vocab + 2

    @property
    def blank(self) -> int:
        return 0

    @property
    def sos(self) -> int:
        return self.vocab + 1

    eos = sos

    @property
    def decoder_d_ff(self) -> int:
        return self.d_ff if self.dec_d_ff is None else self.dec_d_ff

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "ModelConfig":
        def need(cond, field, msg):
            if not cond:
                raise ConfigError(msg, field)

        need(self.task in TASKS, "task", f"must be one of {TASKS}, got {self.task!r}")
        need(self.encoder_type in ("conformer", "transformer"), "encoder_type",
             f"must be 'conformer' or 'transformer', got {self.encoder_type!r}")
        for name in ("d_att", "d_ff", "heads", "kernel", "vocab", "feat_dim", "subsample_channels"):
            need(getattr(self, name) > 0, name, "must be positive")
        need(self.enc_blocks >= 0, "enc_blocks", "must be >= 0")
        need(self.dec_blocks >= 0, "dec_blocks", "must be >= 0")
        need(self.d_att % self.heads == 0, "heads", f"d_att={self.d_att} not divisible by heads={self.heads}")
        need(self.d_att % 2 == 0, "d_att", "must be even (sinusoidal positions)")
        need(self.kernel % 2 == 1, "kernel", f"must be odd, got {self.kernel}")
        need(0.0 <= self.dropout < 1.0, "dropout", "must lie in [0, 1)")
        need(0.0 <= self.ctc_weight <= 1.0, "ctc_weight", "must lie in [0, 1]")
        need(0.0 <= self.label_smoothing < 1.0, "label_smoothing", "must lie in [0, 1)")
        need(self.attention_scale in ("model", "head"), "attention_scale", "must be 'model' or 'head'")
        need(self.ffn_activation in ("swish", "relu"), "ffn_activation", "must be 'swish' or 'relu'")
        need(self.dec_d_ff is None or self.dec_d_ff > 0, "dec_d_ff", "must be positive")
        need(1 <= self.ss_speakers <= 4, "ss_speakers", "must lie in [1, 4]")
        need(self.ss_activation == "relu", "ss_activation", "only 'relu' masks are supported")
        need(self.tts_dp_layers >= 1, "tts_dp_layers", "must be >= 1")
        need(self.tts_dp_kernel % 2 == 1, "tts_dp_kernel", "must be odd")
        if self.task in ("asr", "st"):
            need(self.feat_dim >= nn.SUBSAMPLE_MIN_FRAMES, "feat_dim",
                 f"subsampling needs feat_dim >= {nn.SUBSAMPLE_MIN_FRAMES}")
        return self


PRESETS = {
    "default": dict(task="asr"),
    "librispeech": dict(task="asr", heads=8, d_att=512),
    "st": dict(task="st", vocab=1000, kernel=15),
    "st-small": dict(task="st", vocab=1000, kernel=15, d_ff=1024, dec_d_ff=2048),
    "st-transformer": dict(task="st", vocab=1000, encoder_type="transformer",
                           ffn_activation="relu"),
    "ss": dict(task="ss", enc_blocks=3, dec_blocks=0, d_ff=896, d_att=1024, heads=8,
               feat_dim=129, ss_speakers=2),
    "tts-fs": dict(task="tts", enc_blocks=6, dec_blocks=6, d_att=368, d_ff=1536, heads=2,
                   kernel=7, vocab=80, tts_out_dim=80),
    "tts-fs2": dict(task="tts", enc_blocks=4, dec_blocks=4, d_att=368, d_ff=1536, heads=2,
                    kernel=7, vocab=80, tts_out_dim=80),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "preset") from None
    return ModelConfig(**{**base, **overrides}).validate()


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def init_conformer_block(scope, cfg: ModelConfig, rng, dtype):
    d = cfg.d_att
    for name in ("ffn1", "ffn2"):
        nn.init_ffn(scope.scope(name), d, cfg.d_ff, rng, dtype)
    nn.init_mhsa(scope.scope("mhsa"), d, cfg.heads, rng, dtype, rel_pos=True)
    nn.init_conv_module(scope.scope("conv"), d, cfg.kernel, rng, dtype)
    for name in ("norm_ffn1", "norm_mhsa", "norm_conv", "norm_ffn2"):
        nn.init_layer_norm(scope, name, d, dtype)
    if cfg.final_norm:
        nn.init_layer_norm(scope, "norm_final", d, dtype)


def init_transformer_block(scope, cfg: ModelConfig, rng, dtype):
    nn.init_mhsa(scope.scope("mhsa"), cfg.d_att, cfg.heads, rng, dtype, rel_pos=False)
    nn.init_ffn(scope.scope("ffn"), cfg.d_att, cfg.d_ff, rng, dtype)
    nn.init_layer_norm(scope, "norm_mhsa", cfg.d_att, dtype)
    nn.init_layer_norm(scope, "norm_ffn", cfg.d_att, dtype)


def init_decoder_block(scope, cfg: ModelConfig, rng, dtype):
    nn.init_mhsa(scope.scope("self_attn"), cfg.d_att, cfg.heads, rng, dtype, rel_pos=False)
    nn.init_mhsa(scope.scope("src_attn"), cfg.d_att, cfg.heads, rng, dtype, rel_pos=False)
    nn.init_ffn(scope.scope("ffn"), cfg.d_att, cfg.decoder_d_ff, rng, dtype)
    for name in ("norm1", "norm2", "norm3"):
        nn.init_layer_norm(scope, name, cfg.d_att, dtype)


def init_duration_predictor(scope, cfg: ModelConfig, rng, dtype):
    c_in = cfg.d_att
    ch = cfg.tts_dp_channels or cfg.d_att
    k = cfg.tts_dp_kernel
    for i in range(cfg.tts_dp_layers):
        scope.add(f"conv{i}.weight", nn._uniform(rng, f"{scope.prefix}.conv{i}", (ch, c_in, k), c_in * k, dtype))
        scope.add(f"conv{i}.bias", np.zeros(ch, dtype=dtype))
        nn.init_layer_norm(scope, f"norm{i}", ch, dtype)
        c_in = ch
    nn.init_linear(scope, "out", ch, 1, rng, dtype)


def _init_encoder_blocks(store, cfg, rng, dtype):
    init = init_conformer_block if cfg.encoder_type == "conformer" else init_transformer_block
    for i in range(cfg.enc_blocks):
        init(store.scope(f"enc.block{i}"), cfg, rng, dtype)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Deterministically initialise every tensor of the model for ``config``.

    Weights are uniform in ``+-1/sqrt(fan_in)``, biases zero, layer-norm
    scales one, relative-position biases zero.  Each tensor draws from its
    own named random stream, so the values do not depend on build order.
    """
    cfg = config.validate()
    rng = RNG(seed).child("init")
    store = ParamStore()
    d = cfg.d_att
    if cfg.task in ("asr", "st"):
        nn.init_subsampler(store.scope("frontend"), cfg.feat_dim, d, rng,
                           channels=cfg.subsample_channels, dtype=dtype)
        _init_encoder_blocks(store, cfg, rng, dtype)
        nn.init_linear(store.scope(""), "ctc", d, cfg.odim, rng, dtype)
        dec = store.scope("dec")
        dec.add("embed.weight", rng.child("dec.embed").generator()
                .normal(0.0, 1.0 / math.sqrt(d), size=(cfg.odim, d)).astype(dtype))
        for i in range(cfg.dec_blocks):
            init_decoder_block(dec.scope(f"block{i}"), cfg, rng, dtype)
        nn.init_layer_norm(dec, "norm", d, dtype)
        nn.init_linear(dec, "out", d, cfg.odim, rng, dtype)
    elif cfg.task == "ss":
        nn.init_linear(store.scope("frontend"), "in", cfg.feat_dim, d, rng, dtype)
        _init_encoder_blocks(store, cfg, rng, dtype)
        nn.init_linear(store.scope(""), "mask_head", d, cfg.ss_speakers * cfg.feat_dim, rng, dtype)
    else:
        store.add("tts.embed.weight", rng.child("tts.embed").generator()
                  .normal(0.0, 1.0 / math.sqrt(d), size=(cfg.vocab + 1, d)).astype(dtype))
        _init_encoder_blocks(store, cfg, rng, dtype)
        init_duration_predictor(store.scope("dur"), cfg, rng, dtype)
        for i in range(cfg.dec_blocks):
            init_conformer_block(store.scope(f"dec.block{i}"), cfg, rng, dtype)
        nn.init_linear(store.scope(""), "feat_out", d, cfg.tts_out_dim, rng, dtype)
    return store


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _dropper(rate, mode, rng):
    def drop(x, tag):
        if mode != "train" or rate == 0.0:
            return x
        if rng is None:
            raise ContractError("train mode with dropout needs an rng")
        return T.dropout(x, rate, mode, rng.child(tag))
    return drop


def conformer_block(x: Tensor, p, cfg: ModelConfig, mask=None, frame_mask=None,
                    rel_pos: Tensor | None = None, mode: str = "eval", rng: RNG | None = None,
                    trace: dict | None = None) -> Tensor:
    """Macaron block: half FFN, MHSA, CONV, half FFN, then the final norm.

    ``mask`` is the ``[B, 1, 1, T]`` key mask, ``frame_mask`` the ``[B, T]``
    valid-frame mask.  When ``trace`` is a dict it receives every module
    output and intermediate residual state.
    """
    eps = cfg.ln_eps
    drop = _dropper(cfg.dropout, mode, rng)
    if rel_pos is None:
        rel_pos = relative_positions(x.shape[1], x.shape[2], x.dtype)
    f1 = nn.ffn(nn.norm(x, p, "norm_ffn1", eps), p.scope("ffn1"), cfg.ffn_activation)
    x1 = x + 0.5 * drop(f1, "ffn1")
    a = nn.mhsa(nn.norm(x1, p, "norm_mhsa", eps), p.scope("mhsa"), cfg.heads, mask, rel_pos,
                scale_mode=cfg.attention_scale)
    x2 = x1 + drop(a, "mhsa")
    c = nn.conv_module(nn.norm(x2, p, "norm_conv", eps), p.scope("conv"), mode, frame_mask,
                       cfg.bn_momentum, cfg.bn_eps)
    x3 = x2 + drop(c, "conv")
    f2 = nn.ffn(nn.norm(x3, p, "norm_ffn2", eps), p.scope("ffn2"), cfg.ffn_activation)
    x4 = x3 + 0.5 * drop(f2, "ffn2")
    out = nn.norm(x4, p, "norm_final", eps) if cfg.final_norm else x4
    if trace is not None:
        trace.update(x=x, ffn1=f1, x1=x1, mhsa=a, x2=x2, conv=c, x3=x3, ffn2=f2, x4=x4, out=out)
    return out


def transformer_block(x: Tensor, p, cfg: ModelConfig, mask=None, mode="eval", rng=None) -> Tensor:
    drop = _dropper(cfg.dropout, mode, rng)
    eps = cfg.ln_eps
    x = x + drop(nn.mhsa(nn.norm(x, p, "norm_mhsa", eps), p.scope("mhsa"), cfg.heads, mask,
                         scale_mode=cfg.attention_scale), "mhsa")
    return x + drop(nn.ffn(nn.norm(x, p, "norm_ffn", eps), p.scope("ffn"), cfg.ffn_activation), "ffn")


@functools.lru_cache(maxsize=64)
def _rel_table(T_len, d, dtype_str):
    return nn.rel_pos_table(T_len, d, np.dtype(dtype_str))


@functools.lru_cache(maxsize=64)
def _abs_table(L, d, dtype_str):
    pos = np.arange(L, dtype=np.float64)[:, None]
    inv = np.exp(-np.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((L, d))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv)[:, : d // 2]
    return pe.astype(dtype_str)


def relative_positions(T_len: int, d: int, dtype=np.float32) -> Tensor:
    return _rel_table(T_len, d, np.dtype(dtype).str)


def absolute_positions(L: int, d: int, dtype=np.float32) -> np.ndarray:
    return _abs_table(L, d, np.dtype(dtype).str)


def length_mask(lengths, T_len: int) -> np.ndarray:
    """``[B, T]`` boolean mask, True on the first ``lengths[b]`` frames."""
    return np.arange(T_len)[None, :] < np.asarray(lengths)[:, None]


def encoder_stack(x: Tensor, lengths, params, cfg: ModelConfig, mode="eval", rng=None,
                  prefix="enc") -> Tensor:
    B, T_len, d = x.shape
    frame_mask = length_mask(lengths, T_len)
    mask = frame_mask[:, None, None, :]
    n_blocks = cfg.enc_blocks if prefix == "enc" else cfg.dec_blocks
    if prefix == "enc" and cfg.encoder_type == "transformer":
        x = x + Tensor(absolute_positions(T_len, d, x.dtype))
        for i in range(n_blocks):
            x = transformer_block(x, params.scope(f"{prefix}.block{i}"), cfg, mask, mode,
                                  None if rng is None else rng.child(f"{prefix}.block{i}"))
        return x
    rel_pos = relative_positions(T_len, d, x.dtype)
    for i in range(n_blocks):
        x = conformer_block(x, params.scope(f"{prefix}.block{i}"), cfg, mask, frame_mask, rel_pos,
                            mode, None if rng is None else rng.child(f"{prefix}.block{i}"))
    return x


# ---------------------------------------------------------------------------
# recognition / translation
# ---------------------------------------------------------------------------

def encode(feats, lengths, params, cfg: ModelConfig, mode="eval", rng=None):
    """Frontend then the encoder stack; returns ``(enc_out, enc_lengths)``.

    Recognition/translation models subsample time by four; the separation
    model keeps the frame rate and only projects features to ``d_att``.
    """
    feats = T.as_tensor(feats)
    lengths = np.asarray(lengths)
    if np.any(lengths > feats.shape[1]):
        raise ContractError("lengths exceed the padded time extent")
    if cfg.task in ("asr", "st"):
        x, lengths = nn.subsample(feats, lengths, params.scope("frontend"))
    elif cfg.task == "ss":
        x = nn.linear(feats, params.scope("frontend"), "in")
    else:
        raise ContractError("encode() handles asr/st/ss; use tts_forward for tts")
    return encoder_stack(x, lengths, params, cfg, mode, rng), lengths


def ctc_log_probs(enc_out: Tensor, params) -> Tensor:
    return T.log_softmax(nn.linear(enc_out, params.scope(""), "ctc"), axis=-1)


def decoder_forward(ys_in, enc_out: Tensor, enc_lengths, params, cfg: ModelConfig,
                    mode="eval", rng=None) -> Tensor:
    """Teacher-forced logits ``[B, L, odim]`` for token prefixes ``ys_in``."""
    ys_in = np.asarray(ys_in, dtype=np.int64)
    if ys_in.ndim == 1:
        ys_in = ys_in[None]
    if ys_in.size and (ys_in.min() < 0 or ys_in.max() >= cfg.odim):
        raise ContractError(f"token ids must lie in [0, {cfg.odim})")
    B, L = ys_in.shape
    d = cfg.d_att
    dec = params.scope("dec")
    drop = _dropper(cfg.dropout, mode, rng)
    x = dec["embed.weight"][ys_in] * math.sqrt(d) + Tensor(absolute_positions(L, d, enc_out.dtype))
    causal = np.tril(np.ones((L, L), dtype=bool))[None, None]
    mem_mask = length_mask(enc_lengths, enc_out.shape[1])[:, None, None, :]
    eps = cfg.ln_eps
    for i in range(cfg.dec_blocks):
        p = dec.scope(f"block{i}")
        tag = f"dec.block{i}"
        x = x + drop(nn.mhsa(nn.norm(x, p, "norm1", eps), p.scope("self_attn"), cfg.heads, causal,
                             scale_mode=cfg.attention_scale), f"{tag}.self_attn")
        x = x + drop(nn.mhsa(nn.norm(x, p, "norm2", eps), p.scope("src_attn"), cfg.heads, mem_mask,
                             memory=enc_out, scale_mode=cfg.attention_scale), f"{tag}.src_attn")
        x = x + drop(nn.ffn(nn.norm(x, p, "norm3", eps), p.scope("ffn"), "relu"), f"{tag}.ffn")
    return nn.linear(nn.norm(x, dec, "norm", eps), dec, "out")


def decode_step(y_prefix, enc_out: Tensor, params, cfg: ModelConfig, enc_length=None) -> np.ndarray:
    """Next-token logits ``[odim]`` after ``y_prefix`` (which starts with BOS)."""
    y = np.asarray(y_prefix, dtype=np.int64).reshape(-1)
    if y.size == 0 or y[0] != cfg.sos:
        raise ContractError("prefix must begin with the BOS token")
    if enc_out.ndim == 2:
        enc_out = enc_out.reshape(1, *enc_out.shape)
    if enc_length is None:
        enc_length = enc_out.shape[1]
    with T.no_grad():
        logits = decoder_forward(y[None], enc_out, [enc_length], params, cfg, "eval")
    return logits.data[0, -1]


def greedy_attention_decode(enc_out: Tensor, enc_lengths, params, cfg: ModelConfig,
                            max_len: int | None = None) -> list[list[int]]:
    """Batched greedy search with the attention decoder (no length penalty)."""
    B = enc_out.shape[0]
    if max_len is None:
        max_len = int(enc_out.shape[1]) + 2
    ys = np.full((B, 1), cfg.sos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        for _ in range(max_len):
            logits = decoder_forward(ys, enc_out, enc_lengths, params, cfg, "eval").data[:, -1]
            nxt = logits.argmax(-1)
            nxt[done] = cfg.eos
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == cfg.eos
            if done.all():
                break
    out = []
    for row in ys[:, 1:]:
        hits = np.nonzero(row == cfg.eos)[0]
        out.append(row[: hits[0]].tolist() if hits.size else row.tolist())
    return out


# ---------------------------------------------------------------------------
# separation
# ---------------------------------------------------------------------------

def ss_forward(mag, lengths, params, cfg: ModelConfig, mode="eval", rng=None) -> Tensor:
    """Non-negative masks ``[B, S, T, F]`` for a mixture magnitude ``[B, T, F]``."""
    mag = T.as_tensor(mag)
    B, T_len, F = mag.shape
    if F != cfg.feat_dim:
        raise ContractError(f"expected {cfg.feat_dim} frequency bins, got {F}")
    feats = T.log(mag + 1.0) if cfg.ss_log_input else mag
    h, _ = encode(feats, lengths, params, cfg, mode, rng)
    m = T.relu(nn.linear(h, params.scope(""), "mask_head"))
    return m.reshape(B, T_len, cfg.ss_speakers, F).transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# text-to-speech
# ---------------------------------------------------------------------------

def duration_predictor(h: Tensor, token_mask, params, cfg: ModelConfig, mode="eval", rng=None) -> Tensor:
    """Log-domain duration per token, ``[B, L]``."""
    p = params.scope("dur")
    drop = _dropper(cfg.dropout, mode, rng)
    keep = np.asarray(token_mask)[:, :, None]
    for i in range(cfg.tts_dp_layers):
        h = T.where(keep, h, 0.0)
        h = T.relu(T.conv1d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding="same"))
        h = drop(nn.norm(h, p, f"norm{i}", cfg.ln_eps), f"dur.conv{i}")
    out = nn.linear(h, p, "out")
    return out.reshape(out.shape[0], out.shape[1])


def durations_from_log(dur_log: np.ndarray, token_mask) -> np.ndarray:
    """Invert the ``log(d + 1)`` target: round, clamp at 1, zero on padding."""
    d = np.maximum(np.rint(np.exp(dur_log) - 1.0), 1).astype(np.int64)
    return np.where(np.asarray(token_mask), d, 0)


def length_regulate(h: Tensor, durations) -> tuple[Tensor, np.ndarray]:
    """Repeat token ``i`` of each sequence ``durations[b, i]`` times."""
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 0):
        raise ContractError("durations must be non-negative")
    totals = durations.sum(axis=1)
    if np.any(totals == 0):
        raise ContractError("total duration is 0: length regulation would produce an empty output")
    B, L = durations.shape
    tf = int(totals.max())
    idx = np.zeros((B, tf), dtype=np.int64)
    for b in range(B):
        rep = np.repeat(np.arange(L), durations[b])
        idx[b, : rep.size] = rep
    out = h[np.arange(B)[:, None], idx]
    return out, totals


def tts_forward(tokens, token_lengths, params, cfg: ModelConfig, durations=None,
                mode="eval", rng=None):
    """Return ``(feats_pred [B, T_feat, D], dur_pred_log [B, L], frame_lengths)``.

    Given ``durations`` the length regulator uses them (training);
    otherwise it uses the rounded predictions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.size and (tokens.min() < 0 or tokens.max() > cfg.vocab):
        raise ContractError(f"token ids must lie in [0, {cfg.vocab}]")
    token_lengths = np.asarray(token_lengths)
    token_mask = length_mask(token_lengths, tokens.shape[1])
    x = params["tts.embed.weight"][tokens]
    h = encoder_stack(x, token_lengths, params, cfg, mode, rng, prefix="enc")
    dur_log = duration_predictor(h, token_mask, params, cfg, mode, rng)
    if durations is None:
        durations = durations_from_log(dur_log.data, token_mask)
    else:
        durations = np.where(token_mask, np.asarray(durations, dtype=np.int64), 0)
    frames, frame_lengths = length_regulate(h, durations)
    y = encoder_stack(frames, frame_lengths, params, cfg, mode, rng, prefix="dec")
    return nn.linear(y, params.scope(""), "feat_out"), dur_log, frame_lengths


__all__ = [
    "ModelConfig", "PRESETS", "preset", "build_model", "count_params", "conformer_block",
    "transformer_block", "encode", "encoder_stack", "ctc_log_probs", "decoder_forward",
    "decode_step", "greedy_attention_decode", "ss_forward", "tts_forward", "duration_predictor",
    "length_regulate", "durations_from_log", "length_mask", "relative_positions",
]
