"""Command-line entry point: ``volufuse {simulate,train,fuse,eval,ablate}``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
Configuration precedence: built-in defaults < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import neural, pipeline
from .metrics import aggregate, evaluate_case, render_table, write_csv
from .synthgen import Dataset, DegradationSpec, PhantomSpec, PlacementError, make_dataset
from .volcore import load_volume, save_volume

logger = logging.getLogger("volufuse")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str):
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or Z,Y,X, got {text!r}")
    return tuple(parts)


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="JSON pipeline config; flags override its values")
    g.add_argument("--seed", type=int, help="master seed (default: config value, 0)")
    g.add_argument("--threads", type=int, help="worker threads (fallback: $VOLUFUSE_THREADS, then all cores)")
    g.add_argument("--dump-config", action="store_true", help="print the resolved config as JSON and exit")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field; VALUE is JSON (e.g. --set epochs1=10)")
    g.add_argument("--epochs1", type=int, help="step-one training epochs")
    g.add_argument("--epochs2", type=int, help="step-two training epochs")
    g.add_argument("--lr", type=float, help="generator learning rate")
    g.add_argument("--batch-size", type=int, help="training batch size")
    g.add_argument("--global-shape", type=_triple, help="step-one volume shape, N or Z,Y,X")
    g.add_argument("--patch-shape", type=_triple, help="step-two patch shape, N or Z,Y,X")
    g.add_argument("--patch-overlap", type=_triple, help="step-two tile overlap, N or Z,Y,X")
    g.add_argument("--beta", type=float, help="adversarial loss weight")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="volufuse",
        description="Two-step single-view lightsheet fusion.",
        epilog=__doc__.split("\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic (input, ground truth) dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n", type=int, default=75, help="number of cases (default 75)")
    p.add_argument("--shape", type=_triple, default=(64, 64, 64), help="phantom shape (default 64)")
    p.add_argument("--channels", nargs="+", choices=["nucleus", "membrane"], help="channels to cycle through")
    p.add_argument("--count", type=int, nargs=2, metavar=("MIN", "MAX"), default=PhantomSpec.count_range,
                   help="objects per phantom (default 8 16)")
    p.add_argument("--radius", type=float, nargs=2, metavar=("MIN", "MAX"), default=PhantomSpec.radius_range,
                   help="object radius range in voxels (default 4 7)")
    p.add_argument("--view-axis", choices=["z", "y", "x"], default="z", help="illumination axis")
    p.add_argument("--attenuation", type=float, default=DegradationSpec.attenuation_length,
                   help="attenuation length in voxels")

    p = sub.add_parser("train", help="train the step-one or step-two generator")
    _common(p)
    p.add_argument("--step", type=int, choices=[1, 2], required=True, help="1: global low-resolution model, 2: patch model")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--ckpt1", type=Path, help="step-one checkpoint (step 2; omit for patch-only)")
    p.add_argument("--no-dw", action="store_true", help="train step two without difference weighting")

    p = sub.add_parser("fuse", help="fuse one VOL1 volume with trained checkpoints")
    _common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="input .vol.json")
    p.add_argument("--out", type=Path, required=True, help="output .vol.json")
    p.add_argument("--ckpt1", type=Path, help="step-one checkpoint")
    p.add_argument("--ckpt2", type=Path, help="step-two checkpoint")
    p.add_argument("--no-dw", action="store_true", help="skip difference weighting")

    p = sub.add_parser("eval", help="score predictions listed in a dataset manifest")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--pred-dir", type=Path,
                   help="directory with <case id>.vol.json predictions; otherwise each case's 'output' entry is used")
    p.add_argument("--split", choices=["train", "val", "all"], default="all", help="cases to score (default all)")
    p.add_argument("--method", default="prediction", help="method label written to the CSV")
    p.add_argument("--out", type=Path, required=True, help="CSV report path")

    p = sub.add_parser("ablate", help="train and score all six configurations")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--methods", nargs="+", choices=list(pipeline.METHODS), default=list(pipeline.METHODS),
                   help="configurations to run (default all six)")
    return parser


def resolve_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    d = cfg.to_dict()
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            d[key] = json.loads(value)
        except json.JSONDecodeError:
            d[key] = value
    flags = {
        "epochs1": args.epochs1,
        "epochs2": args.epochs2,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "global_shape": args.global_shape,
        "patch_shape": args.patch_shape,
        "patch_overlap": args.patch_overlap,
        "seed": args.seed,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.threads is not None:
        d["threads"] = args.threads
    if args.beta is not None:
        d["loss"] = {**d["loss"], "beta": args.beta}
    try:
        return pipeline.PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"invalid config: {exc}") from exc


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("VOLUFUSE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"VOLUFUSE_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _load_net(path: Optional[Path], what: str):
    if path is None:
        return None
    if not path.exists():
        raise FileNotFoundError(f"{what} checkpoint not found: {path}")
    return neural.Network.load(path)


def cmd_simulate(args, cfg) -> None:
    phantom = PhantomSpec(
        shape=args.shape,
        count_range=tuple(args.count),
        radius_range=tuple(args.radius),
        spacing=(cfg.iso_spacing,) * 3,
    )
    deg = DegradationSpec(view_axis=args.view_axis, attenuation_length=args.attenuation)
    make_dataset(args.n, phantom, deg, args.out, seed=cfg.seed, channels=args.channels)
    print(f"wrote {args.n} cases to {args.out}")


def cmd_train(args, cfg) -> None:
    data = Dataset(args.data)
    if args.step == 1:
        res = pipeline.train_step1(data, cfg, args.out)
    else:
        gen1 = _load_net(args.ckpt1, "step-one")
        if gen1 is not None and gen1.in_channels != 1:
            raise neural.CheckpointError(f"{args.ckpt1} is not a step-one checkpoint")
        res = pipeline.train_step2(data, gen1, cfg, args.out, dw=not args.no_dw)
    print(f"step {args.step}: best epoch {res.best_epoch}, validation mean nSSIM {res.best_val_nssim:.4f}")
    print(f"checkpoint written to {res.checkpoint}")


def cmd_fuse(args, cfg) -> None:
    if not args.inp.exists():
        raise FileNotFoundError(f"input volume not found: {args.inp}")
    gen1 = _load_net(args.ckpt1, "step-one")
    gen2 = _load_net(args.ckpt2, "step-two")
    if gen2 is not None and gen2.in_channels != (2 if gen1 is not None else 1):
        raise neural.CheckpointError(
            f"step-two checkpoint expects {gen2.in_channels} input channel(s); "
            f"{'pass' if gen2.in_channels == 2 else 'omit'} --ckpt1 accordingly"
        )
    v = load_volume(args.inp)
    out = pipeline.fuse(v, gen1, gen2, cfg, dw=False if args.no_dw else None)
    save_volume(out, args.out)
    print(f"wrote {args.out} {out.shape}")


def cmd_eval(args, cfg) -> None:
    data = Dataset(args.data)
    cases = data.cases if args.split == "all" else data.split(args.split)
    reports = []
    for case in cases:
        if args.pred_dir is not None:
            pred_path = args.pred_dir / f"{case['id']}.vol.json"
        elif "output" in case:
            pred_path = data.root / case["output"]
        else:
            raise UsageError(f"case {case['id']} has no 'output' entry; pass --pred-dir")
        if not pred_path.exists():
            raise FileNotFoundError(f"prediction not found: {pred_path}")
        inp, gt = data.pair(case)
        out = load_volume(pred_path)
        reports.append(
            evaluate_case(inp, out, gt, case["channel"], case_id=case["id"], method=args.method, percentiles=cfg.percentiles)
        )
    if not reports:
        raise ValueError(f"no cases in split {args.split!r}")
    write_csv(reports, args.out)
    print(render_table(aggregate(reports), methods=[args.method]))


def cmd_ablate(args, cfg) -> None:
    res = pipeline.run_ablations(Dataset(args.data), cfg, args.out, methods=args.methods)
    print(res.table)


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s"
    )
    try:
        threads = _threads(args)
        cfg = resolve_config(args)
        cfg = replace(cfg, threads=threads)
        if args.dump_config:
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        neural.set_threads(threads)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"volufuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"volufuse: missing file: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except neural.CheckpointError as exc:
        print(f"volufuse: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except neural.ShapeError as exc:
        print(f"volufuse: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except PlacementError as exc:
        print(f"volufuse: phantom placement failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except pipeline.TrainingDivergedError as exc:
        print(f"volufuse: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"volufuse: invalid input: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"volufuse: I/O failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
