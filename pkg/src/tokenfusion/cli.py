"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (NaN/Inf),
4 oracle or tolerance failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import ConfigError, ContractError, NumericError, OracleError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ORACLE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenfusion",
        description="Dynamic token pruning and inter-modal substitution on synthetic "
                    "multimodal tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--literal-blocks", action="store_true",
                   help="also check the residual-free block variant")

    p = sub.add_parser("export-masks", help="render substitution masks for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--layers", required=True, help="comma-separated 1-based layer indices")
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None)

    p = sub.add_parser("report", help="render figures and a CSV summary for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    return parser


def _cmd_gen_data(args) -> int:
    from .harness import generate_data

    cfg = ExperimentConfig.from_ini(args.config)
    generate_data(cfg, args.out)
    print(f"dataset written to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .harness import load_checkpoint, train

    cfg = ExperimentConfig.from_ini(args.config)
    resume_state = None
    if args.resume:
        ckpt_cfg, resume_state = load_checkpoint(args.resume)
        if ckpt_cfg.to_dict() != cfg.to_dict():
            raise ConfigError("checkpoint config does not match the provided config")
    train(cfg, args.out, resume_state=resume_state)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import evaluate_checkpoint

    print(json.dumps(evaluate_checkpoint(args.ckpt, args.split), indent=2))
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from .harness import grad_check

    report = grad_check(tolerance=args.tol)
    ok = report["passed"]
    if args.literal_blocks:
        literal = grad_check(tolerance=args.tol, residuals=False)
        ok = ok and literal["passed"]
    print(f"max relative error {report['max_rel_err']:.3e} "
          f"({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_ORACLE


def _cmd_export_masks(args) -> int:
    from .harness import export_masks

    try:
        layers = [int(part) for part in args.layers.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse layer list '{args.layers}'") from None
    if not layers:
        raise ConfigError("at least one layer index is required")
    out_dir = args.out or (Path(args.ckpt).parent / "masks")
    written = export_masks(args.ckpt, args.sample, layers, out_dir, split=args.split)
    for path in written:
        print(path)
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import build_report

    for path in build_report(args.run, args.out):
        print(path)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "export-masks": _cmd_export_masks,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OracleError as err:
        print(f"oracle failure: {err}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
