"""Command-line surface.

Subcommands: gen-data, train-teacher, train-student, eval, grad-check.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

GRAD_TOL = 1e-5


def _build_parser():
    p = argparse.ArgumentParser(
        prog="mattedistill",
        description="Trimap-privileged teacher/student distillation for "
                    "alpha matting on synthetic composites.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", required=True, type=int, help="sample count")
    g.add_argument("--size", type=int, default=64, help="square image size")
    g.add_argument("--seed", type=int, default=1, help="base seed")

    t = sub.add_parser("train-teacher", help="pretrain the trimap-fed teacher")
    t.add_argument("--config", required=True, help="JSON config file")

    s = sub.add_parser("train-student", help="train the trimap-free student")
    s.add_argument("--config", required=True, help="JSON config file")
    s.add_argument("--teacher", help="teacher checkpoint (.ppid)")
    s.add_argument("--ablate", choices=["sd", "clsd", "ld", "ald", "none"],
                   help="override the distillation modes for ablation arms")
    s.add_argument("--no-ald-feature", action="store_true",
                   help="zero the ALD feature-loss weight")
    s.add_argument("--no-ald-attention", action="store_true",
                   help="zero the ALD attention-loss weight")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", help="write the JSON report here")

    c = sub.add_parser("grad-check", help="finite-difference gradient sweep")
    c.add_argument("--module", choices=["all", "clsd", "ald", "alpha"],
                   default="all")
    return p


_ABLATE_MODES = {
    "none": ("none", "none"),
    "sd": ("SD", "none"),
    "clsd": ("CLSD", "none"),
    "ld": ("none", "LD"),
    "ald": ("none", "ALD"),
}


def _apply_ablation(cfg, args):
    d = cfg.distill
    changes = {}
    if args.ablate is not None:
        semantic, local = _ABLATE_MODES[args.ablate]
        changes.update(semantic_mode=semantic, local_mode=local)
    if args.no_ald_feature:
        changes.update(alpha_ald=0.0)
    if args.no_ald_attention:
        changes.update(beta_ald=0.0)
    if changes:
        d = dataclasses.replace(d, **changes)
    return dataclasses.replace(cfg, distill=d)


def _run(args) -> int:
    from .train import (ConfigError, NumericError, config_from_json,
                        train_teacher, train_student, evaluate_checkpoint)
    from . import synth

    if args.command == "gen-data":
        samples = synth.generate_dataset(args.out, args.count,
                                         (args.size, args.size), args.seed)
        print(f"wrote {len(samples)} samples to {args.out}")
        return 0

    if args.command == "train-teacher":
        ckpt, _ = train_teacher(config_from_json(args.config))
        print(f"teacher checkpoint: {ckpt}")
        return 0

    if args.command == "train-student":
        cfg = _apply_ablation(config_from_json(args.config), args)
        ckpt, _ = train_student(cfg, teacher_ckpt=args.teacher)
        print(f"student checkpoint: {ckpt}")
        return 0

    if args.command == "eval":
        rep = evaluate_checkpoint(args.ckpt, args.data)
        print(rep.to_text())
        if args.out:
            Path(args.out).write_text(rep.to_json())
            print(f"report written to {args.out}")
        return 0

    if args.command == "grad-check":
        from .gradcheck import run_gradient_checks
        results = run_gradient_checks(args.module)
        ok = True
        for name, err in results.items():
            passed = err <= GRAD_TOL
            ok = ok and passed
            print(f"{name:<6} max rel err {err:.3e}  "
                  f"{'ok' if passed else 'FAIL'}")
        if not ok:
            print(f"gradient check failed (tolerance {GRAD_TOL:g})")
            return 3
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    from .train import ConfigError, NumericError
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
