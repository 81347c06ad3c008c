"""Command-line entry point.

Exit codes: 0 success, 1 other failure, 2 configuration error (including
stage/checkpoint mismatches), 3 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import TASKS, Config, ConfigError, load_config
from .data import generate_dataset, write_dataset
from .train import (
    RunLockedError,
    describe_checkpoint,
    load_records,
    run_eval,
    run_finetune,
    run_pretrain_coarse,
    run_pretrain_fine,
)
from .vocab import DataError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    return cfg.with_overrides(**over) if over else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.data_seed if args.seed is None else args.seed
    report = {}
    for name, count, offset in (("train", cfg.n_train, 0), ("eval", cfg.n_eval, 1)):
        recs = generate_dataset(seed + offset * 1_000_003, count)
        report[name] = {"path": str(out / f"{name}.ndjson"), "records": count, "sha256": write_dataset(out / f"{name}.ndjson", recs, embed_pixels=args.embed_pixels)}
    _emit(report)
    return EXIT_OK


def cmd_pretrain_coarse(args) -> int:
    cfg = _config(args)
    if cfg.stage != "coarse":
        cfg = cfg.with_overrides(stage="coarse")
    res = run_pretrain_coarse(cfg, args.out, init=args.init)
    _emit({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics), "sha256": res.checkpoint_hash, **res.summary})
    return EXIT_OK


def cmd_pretrain_fine(args) -> int:
    cfg = _config(args).with_overrides(stage="fine")
    res = run_pretrain_fine(cfg, args.out, init=args.init)
    _emit({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics), "sha256": res.checkpoint_hash, **res.summary})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    res = run_finetune(args.task, cfg, args.out, init=args.init)
    _emit({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics), "sha256": res.checkpoint_hash, **res.summary})
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.init:
        raise ConfigError("eval needs --init CHECKPOINT")
    cfg = _config(args) if args.config else None
    data_cfg = cfg or Config()
    path = data_cfg.eval_data or data_cfg.train_data
    records = load_records(path, data_cfg.data_seed, data_cfg.n_eval if path is None else 0)
    _emit(run_eval(args.task, args.init, records, out=args.out, cfg=cfg))
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not args.init:
        raise ConfigError("inspect-checkpoint needs --init CHECKPOINT")
    _emit(describe_checkpoint(args.init))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bbfuse", description="Fusion-in-the-backbone vision-language toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    sp = common(sub.add_parser("gen-data", help="write synthetic train/eval datasets"))
    sp.add_argument("--embed-pixels", action="store_true", help="store pixels instead of the regenerate flag")
    sp.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain-coarse", cmd_pretrain_coarse), ("pretrain-fine", cmd_pretrain_fine)):
        sp = common(sub.add_parser(name))
        sp.add_argument("--init", help="checkpoint to start from")
        sp.add_argument("--steps", type=int)
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("finetune"))
    sp.add_argument("--task", required=True, choices=TASKS)
    sp.add_argument("--init", help="pre-trained checkpoint")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = common(sub.add_parser("eval"), out_required=False)
    sp.add_argument("--task", required=True, choices=TASKS)
    sp.add_argument("--init", help="checkpoint to evaluate")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect-checkpoint")
    sp.add_argument("--init", required=True, help="checkpoint path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RunLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
