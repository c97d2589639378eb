"""Command-line entry point: ``tdplan <command> [options]``."""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import RunConfig
from .data import load_dataset
from .errors import TdplanError


def _parse_values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set plan.omega=1.3 (repeatable)")

    parser = argparse.ArgumentParser(prog="tdplan", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="generate or inspect offline datasets", parents=[common])
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    ds_sub.add_parser("gen", help="write <out>/dataset.jsonl", parents=[common])
    insp = ds_sub.add_parser("inspect", help="print dataset statistics as JSON", parents=[common])
    insp.add_argument("path", nargs="?", help="dataset file (default: <out>/dataset.jsonl)")

    for name, text in (("train-ar", "train the autoregressive model"),
                       ("train-diffusion", "train the denoiser"),
                       ("train-invdyn", "train the inverse-dynamics model")):
        sub.add_parser(name, help=text, parents=[common])

    ev = sub.add_parser("eval", help="evaluate TD and TD(-) over seeds", parents=[common])
    ev.add_argument("--n-seeds", type=int)
    sub.add_parser("bench-sps", help="seconds-per-action benchmark", parents=[common])
    ab = sub.add_parser("ablate", help="sweep one planner setting", parents=[common])
    ab.add_argument("--axis", required=True, choices=harness.ABLATION_AXES)
    ab.add_argument("--values", required=True, type=_parse_values)
    ab.add_argument("--n-seeds", type=int)
    sub.add_parser("freq-demo", help="spectra of drafted vs optimised Freq1D plans", parents=[common])
    return parser


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def run(args):
    cfg = load_config(args)
    out = cfg.out
    cmd = args.command
    if cmd == "dataset":
        if args.dataset_command == "gen":
            ds, path = harness.cmd_dataset_gen(cfg, out)
            _emit({"path": str(path), **harness.dataset_summary(ds)})
        else:
            path = args.path or harness.dataset_path(out)
            _emit(harness.dataset_summary(load_dataset(path)))
    elif cmd == "train-ar":
        _, losses = harness.cmd_train_ar(cfg, out)
        _emit({"checkpoint": f"{out}/ar.ckpt", "steps": len(losses), "final_loss": losses[-1] if losses else None})
    elif cmd == "train-diffusion":
        _, losses = harness.cmd_train_diffusion(cfg, out)
        _emit({"checkpoint": f"{out}/diffusion.ckpt", "steps": len(losses),
               "final_loss": losses[-1] if losses else None})
    elif cmd == "train-invdyn":
        _, losses = harness.cmd_train_invdyn(cfg, out)
        _emit({"checkpoint": f"{out}/invdyn.ckpt", "steps": len(losses),
               "final_loss": losses[-1] if losses else None})
    elif cmd == "eval":
        reports, refs = harness.cmd_eval(cfg, out, n_seeds=args.n_seeds)
        _emit({"random_ref": refs.random, "expert_ref": refs.expert,
               "reports": [r.metrics_record() for r in reports]})
    elif cmd == "bench-sps":
        _emit(harness.cmd_bench_sps(cfg, out))
    elif cmd == "ablate":
        reports = harness.cmd_ablate(cfg, out, args.axis, args.values, n_seeds=args.n_seeds)
        _emit([r.metrics_record() for r in reports])
    elif cmd == "freq-demo":
        summary, _ = harness.cmd_freq_demo(cfg, out)
        _emit(summary)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run(args)
    except TdplanError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    except OSError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0
