"""``conformerkit`` command line: gen | train | eval | decode | average | gradcheck.

Exit codes: 0 success, 2 configuration error, 3 numeric fault, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradsuite
from . import runner as R
from . import train as TR
from .errors import ConfigError, ConformerKitError, NumericFault

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CLI_PRESETS = ("default", "librispeech", "ss", "tts-fs", "tts-fs2", "st-small")

log = logging.getLogger("conformerkit")


def _load_run(args) -> R.RunConfig:
    if args.config:
        run = R.RunConfig.from_file(args.config, args.preset, args.seed)
    else:
        run = R.RunConfig.from_string("", args.preset, args.seed)
    if getattr(args, "steps", None) is not None:
        run.steps = args.steps
    return run


def _out_dir(args, default: str) -> Path:
    return Path(args.out_dir or default)


def cmd_gen(args) -> int:
    run = _load_run(args)
    out = _out_dir(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    ds = D.generate(run.task)
    path = out / f"{run.task.kind}.npz"
    D.save_dataset(path, ds)
    print(f"wrote {len(ds)} {run.task.kind} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run(args)
    out = _out_dir(args, "run")
    res = R.train(run, out, resume=args.resume)
    last = res.history[-1] if res.history else None
    if last:
        print(f"trained {last[0]} steps; final validation loss {last[1]:.6g}")
    else:
        print("0 steps: wrote the initial checkpoint only")
    if res.averaged:
        print(f"averaged model: {res.averaged}")
    return EXIT_OK


def _checkpoint_arg(args, run_dir: Path) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    for candidate in [run_dir / R.AVERAGED_NAME, *reversed(R.checkpoint_paths(run_dir))]:
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no checkpoint given and none found in {run_dir}")


def _run_for_checkpoint(args, run_dir: Path) -> R.RunConfig:
    saved = run_dir / R.CONFIG_NAME
    if not args.config and saved.exists():
        return R.RunConfig.from_file(saved, args.preset, args.seed)
    return _load_run(args)


def cmd_eval(args) -> int:
    run_dir = _out_dir(args, "run")
    run = _run_for_checkpoint(args, run_dir)
    ckpt = _checkpoint_arg(args, run_dir)
    params = R.load_params(run, ckpt)
    report = R.evaluate(run, params)
    sys.stdout.write(f"checkpoint={ckpt}\n" + R.format_report(report))
    if args.out_dir:
        R.write_report_csv(run_dir / "eval.csv", report)
    return EXIT_OK


def cmd_decode(args) -> int:
    run_dir = _out_dir(args, "run")
    run = _run_for_checkpoint(args, run_dir)
    ckpt = _checkpoint_arg(args, run_dir)
    params = R.load_params(run, ckpt)
    cfg = run.model_config()
    ds = D.generate(run.task)
    kind = run.task.kind
    if kind == "copy":
        att, ctc = R.decode_copy(ds, params, cfg)
        for i, (a, c, ref) in enumerate(zip(att, ctc, ds.tokens)):
            print(f"{i}\tref={' '.join(map(str, ref))}\tatt={' '.join(map(str, a))}\tctc={' '.join(map(str, c))}")
    elif kind == "mixture":
        est = R.separate(ds, params, cfg)
        path = run_dir / "separated.npz"
        np.savez(path, estimates=est)
        print(f"wrote separated sources {est.shape} to {path}")
    else:
        feats = R.synthesize(ds, params, cfg)
        path = run_dir / "synthesized.npz"
        np.savez(path, **{f"utt{i}": f for i, f in enumerate(feats)})
        print(f"wrote {len(feats)} feature sequences to {path}")
    return EXIT_OK


def cmd_average(args) -> int:
    paths = [Path(p) for p in args.checkpoints]
    run_dir = _out_dir(args, "run")
    if not paths:
        found = [p for p in R.checkpoint_paths(run_dir) if TR.load_checkpoint(p).step > 0]
        if not found:
            raise FileNotFoundError(f"no trained checkpoints in {run_dir}")
        history = []
        by_step = {}
        for p in found:
            ck = TR.load_checkpoint(p)
            history.append((ck.step, ck.metric))
            by_step[ck.step] = p
        paths = [by_step[s] for s in sorted(TR.select_n_best(history, args.n_best))]
    avg = TR.average_checkpoints(paths)
    dest = Path(args.output) if args.output else run_dir / R.AVERAGED_NAME
    TR.save_checkpoint(dest, avg.params, avg.optimizer, avg.step, avg.metric)
    print(f"averaged {len(paths)} checkpoints into {dest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.case or None
    unknown = [n for n in names or [] if n not in gradsuite.CASES]
    if unknown:
        raise ConfigError(f"unknown case(s) {unknown}; choose from {sorted(gradsuite.CASES)}", "case")
    results = gradsuite.run_suite(names, tol=args.tol, seed=args.seed or 0)
    for r in results:
        print(r)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
    common.add_argument("--preset", choices=CLI_PRESETS, default=None, help="model preset")
    common.add_argument("--out-dir", help="output / run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="conformerkit", description="Conformer toolkit on synthetic desk-scale tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset (.npz)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoints + metrics.csv")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--steps", type=int, default=None, help="override [train] steps")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "report task metrics for a checkpoint"),
                             ("decode", cmd_decode, "decode / separate / synthesise")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="defaults to the averaged model in --out-dir")
        p.set_defaults(func=func)

    p = sub.add_parser("average", parents=[common], help="average checkpoints")
    p.add_argument("checkpoints", nargs="*", help="explicit checkpoint files")
    p.add_argument("--n-best", type=int, default=10)
    p.add_argument("--output", help="destination file")
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--case", action="append", help="run only this case (repeatable)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConformerKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
