"""Run configuration, the training loop and evaluation/decoding drivers.

A run is described by an INI file with sections ``[task]``, ``[model]``,
``[train]``, ``[scheduler]`` and ``[augment]``.  Keys mirror the fields of
:class:`~conformerkit.data.TaskSpec`, :class:`~conformerkit.model.ModelConfig`,
:class:`RunConfig` and :class:`~conformerkit.train.SchedulerConfig`.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import loss as L
from . import metrics as M
from . import model as MD
from . import tensor as T
from . import train as TR
from .errors import CheckpointError, ConfigError, NumericFault
from .nn import subsampled_length
from .params import ParamStore
from .rng import RNG

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "lr", "loss_total", "loss_ce", "loss_ctc", "loss_l1", "loss_dur", "grad_norm")
CKPT_PATTERN = "ckpt_{:08d}.cfmr"
AVERAGED_NAME = "model_avg.cfmr"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.ini"

MODEL_TASK = {"copy": "asr", "mixture": "ss", "tts_toy": "tts"}


@dataclass
class AugmentConfig:
    enabled: bool = False
    time_masks: int = 2
    freq_masks: int = 2
    time_width: int = 4
    freq_width: int = 2


@dataclass
class RunConfig:
    task: D.TaskSpec = field(default_factory=D.TaskSpec)
    preset: str = "default"
    model_overrides: dict = field(default_factory=dict)
    scheduler: TR.SchedulerConfig = field(default_factory=TR.SchedulerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    steps: int = 100
    batch_size: int = 8
    checkpoint_every: int = 50
    n_best: int = 10
    grad_clip: float = 5.0
    val_size: int = 32
    seed: int = 0

    def model_config(self) -> MD.ModelConfig:
        """Preset, then explicit overrides, then the fields fixed by the task."""
        t = self.task
        coupled = dict(task=MODEL_TASK[t.kind])
        if t.kind == "copy":
            coupled.update(vocab=t.vocab, feat_dim=t.feat_dim)
        elif t.kind == "mixture":
            coupled.update(feat_dim=D.N_BINS, ss_speakers=t.n_sources)
        else:
            coupled.update(vocab=t.vocab, tts_out_dim=t.feat_dim)
        base = MD.PRESETS.get(self.preset)
        if base is None:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(MD.PRESETS)}", "preset")
        return MD.ModelConfig(**{**base, **self.model_overrides, **coupled}).validate()

    def validate(self) -> "RunConfig":
        self.task.validate()
        cfg = self.model_config()
        if self.steps < 0:
            raise ConfigError("must be >= 0", "steps")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", "checkpoint_every")
        if self.n_best < 1:
            raise ConfigError("must be >= 1", "n_best")
        if self.grad_clip <= 0:
            raise ConfigError("must be positive", "grad_clip")
        if self.val_size < 1:
            raise ConfigError("must be >= 1", "val_size")
        sched = self.resolved_scheduler(cfg).validate()
        if sched.lr_coefficient not in TR.RECOMMENDED_LR_COEFFICIENTS:
            msg = (f"lr_coefficient {sched.lr_coefficient} is outside the usual "
                   f"{TR.RECOMMENDED_LR_COEFFICIENTS}; training may be unstable")
            warnings.warn(msg, stacklevel=2)
            log.warning(msg)
        return self

    def resolved_scheduler(self, cfg: MD.ModelConfig | None = None) -> TR.SchedulerConfig:
        cfg = cfg or self.model_config()
        changes = {"d_att": cfg.d_att}
        if self.scheduler.kind == "onecycle" and self.scheduler.total_steps <= 0:
            changes["total_steps"] = self.steps
        return dataclasses.replace(self.scheduler, **changes)

    # -- INI round trip ------------------------------------------------------
    @classmethod
    def from_file(cls, path, preset: str | None = None, seed: int | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_string(path.read_text(encoding="utf-8"), preset, seed, source=str(path))

    @classmethod
    def from_string(cls, text: str = "", preset: str | None = None, seed: int | None = None,
                    source: str = "<string>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc), "config") from None
        known = {"task", "model", "train", "scheduler", "augment"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown section(s) {sorted(extra)}", "config")

        run_fields = {f.name: f for f in dataclasses.fields(cls)
                      if f.name not in ("task", "preset", "model_overrides", "scheduler", "augment")}
        train = dict(cp["train"]) if cp.has_section("train") else {}
        kw = {k: _coerce(k, v, run_fields[k].default) for k, v in train.items() if k in run_fields}
        bad = set(train) - set(run_fields)
        if bad:
            raise ConfigError(f"unknown key(s) {sorted(bad)}", "train")
        if seed is not None:
            kw["seed"] = seed
        run_seed = kw.get("seed", 0)

        task_kw = _section(cp, "task", D.TaskSpec)
        task_kw.setdefault("seed", run_seed)
        model_raw = dict(cp["model"]) if cp.has_section("model") else {}
        chosen = preset or model_raw.pop("preset", "default")
        model_raw.pop("preset", None)
        mdefaults = {f.name: f.default for f in dataclasses.fields(MD.ModelConfig)}
        bad = set(model_raw) - set(mdefaults)
        if bad:
            raise ConfigError(f"unknown key(s) {sorted(bad)}", "model")
        overrides = {k: _coerce(k, v, mdefaults[k]) for k, v in model_raw.items()}
        return cls(task=D.TaskSpec(**task_kw), preset=chosen, model_overrides=overrides,
                   scheduler=TR.SchedulerConfig(**_section(cp, "scheduler", TR.SchedulerConfig)),
                   augment=AugmentConfig(**_section(cp, "augment", AugmentConfig)), **kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["task"] = {k: str(v) for k, v in dataclasses.asdict(self.task).items()}
        cp["model"] = {"preset": self.preset, **{k: str(v) for k, v in self.model_overrides.items()}}
        cp["train"] = {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)
                       if f.name not in ("task", "preset", "model_overrides", "scheduler", "augment")}
        cp["scheduler"] = {k: str(v) for k, v in dataclasses.asdict(self.scheduler).items()}
        cp["augment"] = {k: str(v) for k, v in dataclasses.asdict(self.augment).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            if raw.lower() in ("", "none"):
                return None
            return int(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", key) from None
    return raw


def _section(cp, name, klass):
    if not cp.has_section(name):
        return {}
    defaults = {f.name: f.default for f in dataclasses.fields(klass)}
    items = dict(cp[name])
    bad = set(items) - set(defaults)
    if bad:
        raise ConfigError(f"unknown key(s) {sorted(bad)}", name)
    return {k: _coerce(k, v, defaults[k]) for k, v in items.items()}


# ---------------------------------------------------------------------------
# batching and per-task objectives
# ---------------------------------------------------------------------------

def check_ctc_feasible(ds: D.CopyDataset) -> None:
    """Fail fast when some utterance has fewer encoder frames than CTC needs."""
    for i, (x, y) in enumerate(zip(ds.feats, ds.tokens)):
        need = len(y) + int(np.sum(y[1:] == y[:-1]))
        have = subsampled_length(len(x))
        if have < need:
            raise ConfigError(
                f"sample {i}: {len(x)} frames subsample to {have}, but CTC needs {need} for "
                f"{len(y)} tokens; raise frames_per_token", "frames_per_token")


def _copy_batch(ds, idx, cfg):
    x, xl = D.pad_stack([ds.feats[i] for i in idx])
    toks = [ds.tokens[i] for i in idx]
    n = max(len(t) for t in toks) + 1
    ys_in = np.full((len(idx), n), cfg.eos, dtype=np.int64)
    ys_out = np.full((len(idx), n), -1, dtype=np.int64)
    for b, t in enumerate(toks):
        ys_in[b, 0] = cfg.sos
        ys_in[b, 1:len(t) + 1] = t
        ys_out[b, :len(t)] = t
        ys_out[b, len(t)] = cfg.eos
    return x, xl, toks, ys_in, ys_out


def _loss_copy(ds, idx, params, cfg, mode, rng, augment: AugmentConfig | None = None):
    x, xl, toks, ys_in, ys_out = _copy_batch(ds, idx, cfg)
    if augment is not None and augment.enabled:
        x = TR.spec_augment(x, augment.time_masks, augment.freq_masks, augment.time_width,
                            augment.freq_width, rng.child("specaug"), xl)
    enc, el = MD.encode(x, xl, params, cfg, mode, rng)
    ctc = L.ctc_loss_batch(MD.ctc_log_probs(enc, params), el, toks)
    logits = MD.decoder_forward(ys_in, enc, el, params, cfg, mode, None if rng is None else rng.child("dec"))
    ce = L.cross_entropy(logits, ys_out, -1, cfg.label_smoothing)
    total = L.joint_loss(ce, ctc, cfg.ctc_weight)
    return total, {"loss_ce": ce.item(), "loss_ctc": ctc.item()}


def _mixture_batch(ds, idx):
    mag = np.abs(ds.mix_spec[idx]).astype(np.float32)
    targets = np.stack([L.psm_target(ds.src_spec[i], ds.mix_spec[i]) for i in idx]).astype(np.float32)
    lengths = np.full(len(idx), mag.shape[1], dtype=np.int64)
    return mag, targets, lengths


def _loss_mixture(ds, idx, params, cfg, mode, rng, augment=None):
    mag, targets, lengths = _mixture_batch(ds, idx)
    masks = MD.ss_forward(mag, lengths, params, cfg, mode, rng)
    rep = L.upit_loss_batch(masks, mag, targets, lengths)
    return rep.total, {}


def _tts_batch(ds, idx):
    tokens, tl = D.pad_stack([ds.tokens[i] for i in idx], pad=0)
    durs, _ = D.pad_stack([ds.durations[i] for i in idx], pad=0)
    feats, fl = D.pad_stack([ds.feats[i] for i in idx])
    return tokens, tl, durs, feats, fl


def _loss_tts(ds, idx, params, cfg, mode, rng, augment=None):
    tokens, tl, durs, feats, fl = _tts_batch(ds, idx)
    pred, dur_log, frame_lengths = MD.tts_forward(tokens, tl, params, cfg, durs, mode, rng)
    rep = L.tts_loss(pred, feats, dur_log, durs, frame_lengths, tl, cfg.tts_dur_weight)
    return rep.total, {"loss_l1": rep.terms["l1"], "loss_dur": rep.terms["dur_mse"]}


LOSSES = {"copy": _loss_copy, "mixture": _loss_mixture, "tts_toy": _loss_tts}


def batch_indices(n: int, batch_size: int, rng: RNG) -> np.ndarray:
    gen = rng.generator()
    if batch_size <= n:
        return np.sort(gen.choice(n, size=batch_size, replace=False))
    return np.sort(gen.integers(0, n, size=batch_size))


def validation_loss(ds, params, cfg, run: RunConfig) -> float:
    idx = np.arange(min(len(ds), run.val_size))
    with T.no_grad():
        total, _ = LOSSES[run.task.kind](ds, idx, params, cfg, "eval", None)
    return total.item()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def checkpoint_paths(out_dir) -> list[Path]:
    return sorted(Path(out_dir).glob("ckpt_*.cfmr"))


@dataclass
class TrainResult:
    params: ParamStore
    history: list
    out_dir: Path
    averaged: Path | None


def train(run: RunConfig, out_dir, resume: bool = False, dataset=None) -> TrainResult:
    """Run the training loop, writing ``metrics.csv`` and checkpoints.

    Raises :class:`NumericFault` on a non-finite loss (before any update of
    that step is applied) and :class:`CheckpointError` when ``out_dir``
    already holds checkpoints and ``resume`` is false.
    """
    run.validate()
    cfg = run.model_config()
    sched = run.resolved_scheduler(cfg)
    out = Path(out_dir)
    existing = checkpoint_paths(out) if out.exists() else []
    if existing and not resume:
        raise CheckpointError(f"{out} already contains checkpoints; pass --resume to continue")
    out.mkdir(parents=True, exist_ok=True)

    ds = dataset if dataset is not None else D.generate(run.task)
    if run.task.kind == "copy" and cfg.ctc_weight > 0:
        check_ctc_feasible(ds)
    loss_fn = LOSSES[run.task.kind]
    root = RNG(run.seed).child("train")

    history = []
    if existing:
        last = TR.load_checkpoint(existing[-1])
        params = MD.build_model(cfg, run.seed)
        _assign(params, last.params, existing[-1])
        opt = TR.optimizer_from_tensors(last.optimizer, last.step)
        start = last.step
        for p in existing:
            ck = TR.load_checkpoint(p)
            if ck.step > 0:
                history.append((ck.step, ck.metric))
        _truncate_csv(out / METRICS_NAME, start)
        log.info("resuming from %s at step %d", existing[-1], start)
    else:
        params = MD.build_model(cfg, run.seed)
        opt = TR.OptimizerState()
        start = 0
        (out / CONFIG_NAME).write_text(run.to_ini(), encoding="utf-8")
        TR.save_checkpoint(out / CKPT_PATTERN.format(0), params, opt, 0, validation_loss(ds, params, cfg, run))
        with open(out / METRICS_NAME, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CSV_HEADER)

    trainable = list(params.trainable().values())
    with open(out / METRICS_NAME, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start + 1, run.steps + 1):
            srng = root.child("step", step)
            idx = batch_indices(len(ds), run.batch_size, srng.child("batch"))
            try:
                total, terms = loss_fn(ds, idx, params, cfg, "train", srng.child("forward"), run.augment)
                value = total.item()
                if not math.isfinite(value):
                    raise NumericFault(f"non-finite loss {value}")
                T.backward(total, trainable)
            except NumericFault as exc:
                raise NumericFault(f"step {step}: {exc}") from exc
            grad_norm = TR.global_grad_norm(trainable)
            if not math.isfinite(grad_norm):
                raise NumericFault(f"non-finite gradient norm at step {step}")
            TR.clip_grad_norm(trainable, run.grad_clip)
            lr = sched.lr(step)
            TR.adam_step(params, opt, lr)
            writer.writerow([step, _fmt(lr), _fmt(value), _fmt(terms.get("loss_ce")),
                             _fmt(terms.get("loss_ctc")), _fmt(terms.get("loss_l1")),
                             _fmt(terms.get("loss_dur")), _fmt(grad_norm)])
            if step % run.checkpoint_every == 0 or step == run.steps:
                fh.flush()
                metric = validation_loss(ds, params, cfg, run)
                TR.save_checkpoint(out / CKPT_PATTERN.format(step), params, opt, step, metric)
                history.append((step, metric))
                log.info("step %d loss %.4f val %.4f lr %.3g", step, value, metric, lr)

    averaged = None
    if history:
        best = TR.select_n_best(history, run.n_best)
        avg = TR.average_checkpoints([out / CKPT_PATTERN.format(s) for s in sorted(best)])
        TR.save_checkpoint(out / AVERAGED_NAME, avg.params, avg.optimizer, avg.step, avg.metric)
        averaged = out / AVERAGED_NAME
    return TrainResult(params, history, out, averaged)


def _truncate_csv(path: Path, last_step: int) -> None:
    """Drop log rows written after the checkpoint we resume from."""
    if not path.exists():
        raise CheckpointError(f"cannot resume: {path} is missing")
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_step]
    path.write_text("".join(keep), encoding="utf-8")


def _assign(params: ParamStore, loaded: ParamStore, source) -> None:
    """Copy checkpoint tensors into a freshly built store, checking compatibility."""
    if set(params) != set(loaded):
        missing = sorted(set(params) ^ set(loaded))
        raise CheckpointError(f"{source}: incompatible with the configured model (e.g. {missing[0]})")
    for k, t in params.items():
        src = loaded[k]
        if src.shape != t.shape:
            raise CheckpointError(f"{source}: tensor {k} has shape {src.shape}, model expects {t.shape}")
        t.data = np.array(src.data, dtype=t.dtype)


def load_params(run: RunConfig, checkpoint) -> ParamStore:
    cfg = run.model_config()
    params = MD.build_model(cfg, run.seed)
    _assign(params, TR.load_checkpoint(checkpoint).params, checkpoint)
    return params


# ---------------------------------------------------------------------------
# evaluation and decoding
# ---------------------------------------------------------------------------

def decode_copy(ds, params, cfg, batch: int = 16):
    att, ctc = [], []
    for lo in range(0, len(ds), batch):
        idx = np.arange(lo, min(lo + batch, len(ds)))
        x, xl = D.pad_stack([ds.feats[i] for i in idx])
        with T.no_grad():
            enc, el = MD.encode(x, xl, params, cfg, "eval")
            lp = MD.ctc_log_probs(enc, params).data
            max_len = max(len(ds.tokens[i]) for i in idx) + 5
            att.extend(MD.greedy_attention_decode(enc, el, params, cfg, max_len))
        ctc.extend(L.ctc_greedy_decode(lp[b, :el[b]]) for b in range(len(idx)))
    return att, ctc


def separate(ds, params, cfg, batch: int = 8) -> np.ndarray:
    """Estimated source waveforms ``[N, S, n]`` (mask times mixture spectrum)."""
    out = []
    n = ds.mix_wave.shape[-1]
    for lo in range(0, len(ds), batch):
        idx = np.arange(lo, min(lo + batch, len(ds)))
        mag, _, lengths = _mixture_batch(ds, idx)
        with T.no_grad():
            masks = MD.ss_forward(mag, lengths, params, cfg, "eval").data
        for b, i in enumerate(idx):
            spec = masks[b].astype(np.float64) * ds.mix_spec[i][None]
            out.append(np.stack([D.istft(s, n) for s in spec]))
    return np.stack(out)


def best_permutation_sdr(estimates, sources) -> tuple[float, tuple, list]:
    """Mean SDR under the best speaker assignment, the permutation and per-source values."""
    S = sources.shape[0]
    best = None
    for perm in itertools.permutations(range(S)):
        vals = [M.sdr(estimates[perm[s]], sources[s]) for s in range(S)]
        score = float(np.mean(vals))
        if best is None or score > best[0]:
            best = (score, perm, vals)
    return best


def synthesize(ds, params, cfg):
    feats = []
    for i in range(len(ds)):
        tok = ds.tokens[i][None]
        with T.no_grad():
            pred, _, fl = MD.tts_forward(tok, [tok.shape[1]], params, cfg, None, "eval")
        feats.append(pred.data[0, : fl[0]])
    return feats


def evaluate(run: RunConfig, params: ParamStore, dataset=None) -> dict:
    """Task metrics on the (held-in) dataset described by ``run.task``."""
    cfg = run.model_config()
    ds = dataset if dataset is not None else D.generate(run.task)
    kind = run.task.kind
    if kind == "copy":
        att, ctc = decode_copy(ds, params, cfg)
        refs = [t.tolist() for t in ds.tokens]

        def wer(hyps):
            return M.error_rate([M.split_words(h, 1) for h in hyps], [M.split_words(r, 1) for r in refs])

        return {"cer_att": M.error_rate(att, refs), "wer_att": wer(att),
                "cer_ctc": M.error_rate(ctc, refs), "wer_ctc": wer(ctc), "n": len(refs)}
    if kind == "mixture":
        est = separate(ds, params, cfg)
        scores, inputs = [], []
        for i in range(len(ds)):
            scores.append(best_permutation_sdr(est[i], ds.src_wave[i])[0])
            inputs.append(np.mean([M.sdr(ds.mix_wave[i], s) for s in ds.src_wave[i]]))
        return {"sdr": float(np.mean(scores)), "sdr_mixture": float(np.mean(inputs)),
                "sdri": float(np.mean(scores) - np.mean(inputs)), "n": len(ds)}
    preds = synthesize(ds, params, cfg)
    mcd = [M.mcd_dtw(p, r) for p, r in zip(preds, ds.feats)]
    return {"mcd": float(np.mean(mcd)), "n": len(ds)}


def format_report(report: dict) -> str:
    return "".join(f"{k}={v:.6g}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in report.items())


def write_report_csv(path, report: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, _fmt(v) if isinstance(v, float) else v])
