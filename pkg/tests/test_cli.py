import csv
import subprocess
import sys
import warnings

import numpy as np
import pytest

from conformerkit import cli
from conformerkit import data as D
from conformerkit import runner as R
from conformerkit import train as TR
from conformerkit.errors import NumericFault

HEADER = "step,lr,loss_total,loss_ce,loss_ctc,loss_l1,loss_dur,grad_norm"

TINY_MODEL = """
[model]
enc_blocks = 1
dec_blocks = 1
d_att = 8
d_ff = 16
heads = 2
kernel = 3
subsample_channels = 4
"""

COPY = """
[task]
kind = copy
vocab = 4
min_len = 2
max_len = 3
feat_dim = 8
n_samples = 6
frames_per_token = 8
""" + TINY_MODEL + """
[train]
steps = 4
batch_size = 3
checkpoint_every = 2
n_best = 2
val_size = 4

[scheduler]
warmup_steps = 10
"""

MIX = """
[task]
kind = mixture
n_samples = 2
seconds = 0.1
[model]
preset = ss
enc_blocks = 1
d_att = 8
d_ff = 8
heads = 2
kernel = 3
[train]
steps = 2
batch_size = 2
checkpoint_every = 1
"""

TTS = """
[task]
kind = tts_toy
vocab = 4
min_len = 2
max_len = 3
feat_dim = 4
n_samples = 3
""" + TINY_MODEL + """
[train]
steps = 2
batch_size = 2
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


def test_parser_lists_subcommands_and_presets():
    p = cli.build_parser()
    sub = next(a for a in p._actions if a.dest == "command")
    assert set(sub.choices) == {"gen", "train", "eval", "decode", "average", "gradcheck"}
    assert set(cli.CLI_PRESETS) == {"default", "librispeech", "ss", "tts-fs", "tts-fs2", "st-small"}


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    cfg = write(tmp_path, COPY)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out-dir", str(out), "--steps", "0"]) == 0
    assert [p.name for p in R.checkpoint_paths(out)] == ["ckpt_00000000.cfmr"]
    assert not (out / R.AVERAGED_NAME).exists()
    assert (out / "metrics.csv").read_text().splitlines() == [HEADER]


def test_train_writes_csv_and_checkpoints(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", write(tmp_path, COPY), "--out-dir", str(out)]) == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert ",".join(rows[0]) == HEADER
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    for r in rows[1:]:
        assert r[5] == "" and r[6] == ""      # no TTS terms on the copy task
        total, ce, ctc = map(float, r[2:5])
        assert total == pytest.approx(0.3 * ctc + 0.7 * ce, rel=1e-5)
    names = [p.name for p in R.checkpoint_paths(out)]
    assert names == ["ckpt_00000000.cfmr", "ckpt_00000002.cfmr", "ckpt_00000004.cfmr"]
    assert (out / R.AVERAGED_NAME).exists() and (out / R.CONFIG_NAME).exists()


def test_collision_refused_then_resume_matches_straight_run(tmp_path):
    cfg = write(tmp_path, COPY)
    straight, split = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", cfg, "--out-dir", str(straight)]) == 0
    assert cli.main(["train", "--config", cfg, "--out-dir", str(split), "--steps", "2"]) == 0
    assert cli.main(["train", "--config", cfg, "--out-dir", str(split), "--steps", "4"]) == 4
    assert cli.main(["train", "--config", cfg, "--out-dir", str(split), "--steps", "4", "--resume"]) == 0
    assert (straight / "metrics.csv").read_bytes() == (split / "metrics.csv").read_bytes()
    a = (straight / "ckpt_00000004.cfmr").read_bytes()
    assert a == (split / "ckpt_00000004.cfmr").read_bytes()


def test_seed_flag_changes_run(tmp_path):
    cfg = write(tmp_path, COPY)
    for name, seed in (("a", "1"), ("b", "2")):
        cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / name), "--steps", "1", "--seed", seed])
    assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()


def test_lr_coefficient_warning():
    run = R.RunConfig.from_string(COPY + "lr_coefficient = 3\n")
    with pytest.warns(UserWarning, match="lr_coefficient"):
        run.validate()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        R.RunConfig.from_string(COPY + "lr_coefficient = 5\n").validate()


@pytest.mark.parametrize("text", [COPY.replace("kernel = 3", "kernel = 4"), "[bogus]\nx = 1\n",
                                  "[train]\nstepz = 3\n", "[task]\nkind = speech\n", "[train]\nsteps = many\n"])
def test_config_errors_exit_2(tmp_path, text, capsys):
    cfg = write(tmp_path, text)
    assert cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / "r")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_exits_4(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.ini"), "--out-dir", str(tmp_path)]) == 4


def test_ctc_infeasible_task_is_config_error(tmp_path):
    cfg = write(tmp_path, COPY.replace("frames_per_token = 8", "frames_per_token = 1"))
    assert cli.main(["train", "--config", cfg, "--out-dir", str(tmp_path / "r")]) == 2


def test_non_finite_loss_names_step(tmp_path):
    run = R.RunConfig.from_string(COPY)
    ds = D.generate(run.task)
    ds.feats[0][:] = np.nan
    ds.feats[1][:] = np.nan
    with pytest.raises(NumericFault):
        R.train(run, tmp_path / "r", dataset=ds)


def test_numeric_fault_exit_code(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise NumericFault("step 7: non-finite loss nan")
    monkeypatch.setattr(R, "train", boom)
    assert cli.main(["train", "--config", write(tmp_path, COPY), "--out-dir", str(tmp_path)]) == 3


def test_gen_writes_dataset(tmp_path):
    assert cli.main(["gen", "--config", write(tmp_path, TTS), "--out-dir", str(tmp_path)]) == 0
    ds = D.load_dataset(tmp_path / "tts_toy.npz")
    assert len(ds) == 3


def test_eval_decode_average_on_copy(tmp_path, capsys):
    out = tmp_path / "run"
    cli.main(["train", "--config", write(tmp_path, COPY), "--out-dir", str(out)])
    capsys.readouterr()
    assert cli.main(["eval", "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    for key in ("cer_att", "wer_att", "cer_ctc", "wer_ctc"):
        assert key in text
    assert (out / "eval.csv").exists()
    assert cli.main(["decode", "--out-dir", str(out), "--checkpoint", str(out / "ckpt_00000002.cfmr")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and "ref=" in lines[0]
    dest = tmp_path / "avg.cfmr"
    paths = [str(p) for p in R.checkpoint_paths(out)[1:]]
    assert cli.main(["average", *paths, "--output", str(dest)]) == 0
    a, b = (TR.load_checkpoint(p) for p in paths)
    avg = TR.load_checkpoint(dest)
    k = "enc.block0.ffn1.w1.weight"
    np.testing.assert_array_equal(avg.params[k].data,
                                  ((a.params[k].data.astype(np.float64) + b.params[k].data) / 2).astype(np.float32))
    assert cli.main(["average", "--out-dir", str(out), "--n-best", "1", "--output", str(dest)]) == 0


def test_eval_without_checkpoint_exits_4(tmp_path):
    assert cli.main(["eval", "--config", write(tmp_path, COPY), "--out-dir", str(tmp_path / "empty")]) == 4


@pytest.mark.parametrize("text,key,artifact", [(MIX, "sdri", "separated.npz"), (TTS, "mcd", "synthesized.npz")])
def test_other_tasks_end_to_end(tmp_path, capsys, text, key, artifact):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", write(tmp_path, text), "--out-dir", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--out-dir", str(out)]) == 0
    assert key in capsys.readouterr().out
    assert cli.main(["decode", "--out-dir", str(out)]) == 0
    assert (out / artifact).exists()


def test_gradcheck_subcommand(capsys):
    assert cli.main(["gradcheck", "--case", "ffn"]) == 0
    assert capsys.readouterr().out.startswith("PASS ffn")
    assert cli.main(["gradcheck", "--case", "ffn", "--tol", "1e-30"]) == 3
    assert cli.main(["gradcheck", "--case", "nope"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "conformerkit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
