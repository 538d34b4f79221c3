"""Copy task: a small Conformer encoder-decoder learns to transcribe token
patterns, trained with the joint CTC / attention objective.

    python3 demos/01_copy_task.py [--steps N] [--out-dir DIR]
"""

import argparse
from pathlib import Path

from conformerkit import data as D
from conformerkit import runner as R

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out-dir", default="demo_runs/copy")
    args = ap.parse_args()

    run = R.RunConfig.from_file(HERE / "configs" / "copy.ini")
    if args.steps is not None:
        run.steps = args.steps
    ds = D.generate(run.task)
    x, y = ds.feats[0], ds.tokens[0]
    print(f"{len(ds)} utterances; the first has {len(y)} tokens {y.tolist()} "
          f"rendered as {x.shape[0]} frames of {x.shape[1]} features")

    cfg = run.model_config()
    print(f"model: {cfg.enc_blocks} Conformer blocks, {cfg.dec_blocks} decoder block, "
          f"d_att={cfg.d_att}, ctc weight {cfg.ctc_weight}")

    # every frame sequence shrinks by 4x in the subsampler, so 8 frames per
    # token leaves two encoder frames per token for CTC
    res = R.train(run, args.out_dir, resume=(Path(args.out_dir) / R.METRICS_NAME).exists())
    print(f"trained {run.steps} steps, averaged model at {res.averaged}")

    params = R.load_params(run, res.averaged)
    report = R.evaluate(run, params, ds)
    print(R.format_report(report), end="")

    att, ctc = R.decode_copy(ds, params, cfg)
    for ref, a, c in list(zip(ds.tokens, att, ctc))[:3]:
        print(f"ref {ref.tolist()}\n  attention {a}\n  ctc       {c}")


if __name__ == "__main__":
    main()
