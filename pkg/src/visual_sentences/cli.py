"""Command-line entry point: gen-data, train, eval, sample, repro, inspect-checkpoint."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import experiments as E
from .checkpoint import CheckpointError, read_container
from .recipes import RECIPES
from .training import REGIMES, NumericalError
from .sampling import SamplingError
from .worlds import SceneError, UnsupportedContextError

logger = logging.getLogger("visual_sentences")


def _shots(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visual-sentences", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write task samples as PNG frames plus manifests")
    p.add_argument("--task", required=True)
    p.add_argument("--context", required=True, choices=["I", "II", "III", "IV"])
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--direction", choices=["understanding", "generation"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fine-tune adapters (or pre-train a base) from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--regime", choices=list(REGIMES))
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--out")
    p.add_argument("--resume", help="epoch checkpoint to continue from")

    p = sub.add_parser("eval", help="score a checkpoint on held-out sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--context", required=True, choices=["I", "II", "III", "IV"])
    p.add_argument("--shots", type=_shots, default=(4,))
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--direction", choices=["understanding", "generation"])
    p.add_argument("--reversed", action="store_true",
                   help="flip each sentence so the annotation conditions the natural clip")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="generate the target of one seeded sentence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--context", required=True, choices=["I", "II", "III", "IV"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shots", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--direction", choices=["understanding", "generation"])
    p.add_argument("--trace-strip", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("repro", help="run a full experiment recipe")
    p.add_argument("recipe", choices=list(RECIPES))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=["smoke", "desk"], default="desk")
    p.add_argument("--base-checkpoint")

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata and tensors")
    p.add_argument("path")
    return parser


def _cmd_gen_data(args) -> int:
    out = E.gen_data(args.task, args.context, args.count, args.seed, args.out, args.direction)
    print(out)
    return E.EXIT_OK


def _cmd_train(args) -> int:
    overrides = {}
    if args.regime:
        overrides["regime"] = args.regime
    if args.out:
        overrides["out"] = args.out
    if args.resume:
        overrides["resume"] = args.resume
    cfg = E.load_run_config(args.config, overrides)
    manifest = E.train(cfg, data_dir=args.data)
    print(json.dumps({"run_id": manifest.run_id, "out": cfg.out,
                      "checkpoints": sorted(manifest.checkpoints)}, indent=2))
    return E.EXIT_OK


def _cmd_eval(args) -> int:
    from .metrics import format_table

    reports, _ = E.evaluate(args.checkpoint, args.task, args.context, args.shots,
                            args.split_seed, args.count, args.reversed, args.steps, args.out,
                            args.direction)
    print(format_table(reports))
    return E.EXIT_OK


def _cmd_sample(args) -> int:
    E.sample_to_dir(args.checkpoint, args.task, args.context, args.seed, args.out, args.shots,
                    args.steps, args.direction, args.trace_strip)
    print(args.out)
    return E.EXIT_OK


def _cmd_repro(args) -> int:
    from . import recipes

    table = recipes.run(args.recipe, args.out, seed=args.seed, scale=args.scale,
                        base_checkpoint=args.base_checkpoint)
    print(table)
    return E.EXIT_OK


def _cmd_inspect(args) -> int:
    meta, tensors = read_container(args.path)
    print(json.dumps({k: v for k, v in meta.items() if k != "extra"}, indent=2, sort_keys=True))
    for name, a in tensors.items():
        print(f"{name:60s} {str(a.dtype):8s} {tuple(a.shape)}")
    n = sum(int(np.prod(a.shape)) for k, a in tensors.items() if not k.startswith("optim."))
    print(f"{len(tensors)} tensors, {n} parameters (excluding optimizer state)")
    return E.EXIT_OK



_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "repro": _cmd_repro,
    "inspect-checkpoint": _cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (E.ConfigError, UnsupportedContextError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return E.EXIT_CONFIG
    except (E.DataError, SceneError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return E.EXIT_DATA
    except (NumericalError, SamplingError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return E.EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
