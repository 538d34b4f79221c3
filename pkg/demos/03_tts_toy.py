"""Non-autoregressive synthesis on the toy TTS task: encoder, duration
predictor, length regulator and decoder, scored with MCD after DTW.

    python3 demos/03_tts_toy.py [--steps N] [--out-dir DIR]
"""

import argparse
from pathlib import Path

import numpy as np

from conformerkit import data as D
from conformerkit import metrics as M
from conformerkit import runner as R

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out-dir", default="demo_runs/tts")
    args = ap.parse_args()

    run = R.RunConfig.from_file(HERE / "configs" / "tts_toy.ini")
    if args.steps is not None:
        run.steps = args.steps
    ds = D.generate(run.task)
    print(f"first utterance: tokens {ds.tokens[0].tolist()}, durations {ds.durations[0].tolist()}, "
          f"{len(ds.feats[0])} frames")

    res = R.train(run, args.out_dir, resume=(Path(args.out_dir) / R.METRICS_NAME).exists())
    params = R.load_params(run, res.averaged)
    feats = R.synthesize(ds, params, run.model_config())
    # synthesis uses predicted durations, so lengths may differ from the reference
    for i in range(3):
        print(f"utt {i}: {len(feats[i])} frames predicted vs {len(ds.feats[i])} reference, "
              f"MCD {M.mcd_dtw(feats[i], ds.feats[i]):.3f} dB")
    print(f"mean MCD {np.mean([M.mcd_dtw(p, r) for p, r in zip(feats, ds.feats)]):.3f} dB")


if __name__ == "__main__":
    main()
