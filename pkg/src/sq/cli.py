"""Command line interface.

Usage::

    sq calibrate --config experiment.json [--artifacts DIR]
    sq quantize  --config experiment.json [--artifacts DIR]
    sq evaluate  --config experiment.json [--artifacts DIR]
    sq challenge --config experiment.json [--artifacts DIR]
    sq verify    --config experiment.json [--artifacts DIR]

Exit codes: 0 success, 1 error (bad config, missing artifacts, lock held),
2 verification failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import PipelineConfig
from .errors import SqError
from .pipeline import (
    run_calibrate,
    run_challenge,
    run_evaluate,
    run_quantize,
    run_verify,
)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sq",
        description="Salience-balanced post-training quantization pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("calibrate", "estimate salience statistics and balancing factors"),
        ("quantize", "fold balancing offline and fit quantization parameters"),
        ("evaluate", "compare the quantized stack against full precision"),
        ("challenge", "emit channel-difficulty and drift statistics"),
        ("verify", "re-check every artifact invariant"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the experiment JSON")
        cmd.add_argument(
            "--artifacts",
            default=None,
            help="artifact directory (overrides output.artifacts)",
        )
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        artifacts = args.artifacts or cfg.raw["output"]["artifacts"]
        if args.command == "calibrate":
            calib = run_calibrate(cfg, artifacts)
            for name, lb in calib.layers.items():
                print(
                    f"calibrated {name:<12} mode={lb.mode:<8} "
                    f"overall salience {lb.so_pre:.3f} -> {lb.so_post:.3f}"
                )
            print(f"artifacts written to {artifacts}")
        elif args.command == "quantize":
            qm = run_quantize(cfg, artifacts)
            quant = cfg.raw["quant"]
            print(
                f"quantized W{quant['weight_bits']}A{quant['act_bits']} "
                f"({len(qm.folded_weights)} layers, projection2={qm.proj_mode})"
            )
            print(f"checkpoint written to {artifacts}")
        elif args.command == "evaluate":
            report = run_evaluate(cfg, artifacts)
            block = report["block"]
            print(
                f"block output MSE {block['out_mse']:.6g}, "
                f"relative deviation mean {block['rel_dev_mean']:.3e} "
                f"max {block['rel_dev_max']:.3e}"
            )
            if report["fold_alert"]:
                print(
                    f"WARNING: fold deviation {report['fold_deviation']:.3e} "
                    "exceeds tolerance; artifacts look corrupted"
                )
            print(f"report written to {artifacts}")
        elif args.command == "challenge":
            reports = run_challenge(cfg, artifacts)
            print(f"{'layer':<12} {'act corr':>9} {'weight corr':>12}")
            for name, rep in reports.items():
                print(f"{name:<12} {rep.act_rank_corr:>9.4f} {rep.weight_rank_corr:>12.4f}")
            print(f"challenge tables written to {artifacts}")
        elif args.command == "verify":
            result = run_verify(cfg, artifacts)
            for name, ok, detail in result.checks:
                print(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}")
            if not result.ok:
                print("verification FAILED")
                return 2
            print("verification passed")
        return 0
    except SqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
