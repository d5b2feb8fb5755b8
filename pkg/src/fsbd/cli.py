"""Command-line harness: run / sweep / eval / gen-synthetic.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import desk_scale_config, load_config
from .data import save_idx, synthetic
from .errors import ConfigError, FormatError, InputError


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("FSBD_THREADS")
    return max(1, int(env)) if env else 1


def _resolve_config(args):
    if args.desk_scale:
        cfg = desk_scale_config()
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("either --config or --desk-scale is required")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, rounds=replace(cfg.rounds, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def cmd_run(args) -> int:
    from .runner import ExperimentRunner

    cfg = _resolve_config(args)
    runner = ExperimentRunner(cfg, threads=_threads(args))
    runner.run()
    out = Path(cfg.out)
    rec = getattr(runner.adversary, "record", None)
    print(f"run complete: {runner.state.round} rounds, artifacts in {out}")
    if rec is not None:
        print(f"injection at round {rec.round}")
    if runner.log:
        last = runner.log[-1]
        print(f"final acc_main={last['acc_main']:.4f} acc_backdoor={last['acc_backdoor']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from .runner import sweep_delta, sweep_epsilon, sweep_t_delta

    cfg = _resolve_config(args)
    values = [float(v) for v in args.values.split(",")]
    if len(values) < 2:
        raise ConfigError("sweep needs at least 2 values")
    threads = _threads(args)
    if args.axis == "t_delta":
        rows = sweep_t_delta(cfg, values, threads)
    elif args.axis == "delta":
        rows = sweep_delta(cfg, values, threads)
    else:
        rows = sweep_epsilon(cfg, values, post_rounds=args.post_rounds, threads=threads)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.axis}.csv"
    with open(path, "w", newline="") as f:
        f.write(f"# fsbd-sweep-{args.axis}-v1\n")
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    from .runner import evaluate_checkpoint

    cfg = _resolve_config(args)
    result = evaluate_checkpoint(cfg, args.checkpoint, args.triggers, args.compare)
    for key, value in result.items():
        print(f"{key}: {value:.6f}")
    return 0


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, seed in (("train", args.seed), ("test", args.seed + 1)):
        per_class = args.per_class if split == "train" else args.test_per_class
        ds = synthetic(args.classes, per_class, seed)
        save_idx(ds, out / f"{split}-images-idx3-ubyte", out / f"{split}-labels-idx1-ubyte")
        print(f"{split}: {len(ds)} examples -> {out}/{split}-*-ubyte")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsbd",
                                     description="Federated-learning backdoor simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--desk-scale", action="store_true",
                       help="built-in n=20/m=5 preset (MNIST if FSBD_MNIST_DIR is set, else synthetic)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, help="worker threads (env FSBD_THREADS)")

    p_run = sub.add_parser("run", help="execute one experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one backdoor parameter from a shared prefix")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("t_delta", "delta", "epsilon"))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--post-rounds", type=int, default=50,
                         help="adversary-free rounds after injection (epsilon axis)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--triggers", help="trigger file prefix (without .fsbd/.json)")
    p_eval.add_argument("--compare", help="second checkpoint for CKA")
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset as IDX files")
    p_gen.add_argument("--classes", type=int, default=10)
    p_gen.add_argument("--per-class", type=int, default=400)
    p_gen.add_argument("--test-per-class", type=int, default=100)
    p_gen.add_argument("--seed", type=int, default=1)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (InputError, FormatError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
