"""Command-line entry point.

Exit status: 0 on success, 1 on a validation error (bad config, spec,
checkpoint or dataset), 2 when an equivalence gate fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .clustering import ClusterAssignment
from .config import ExperimentConfig, parse_config
from .metrics import write_summary
from .model import accuracy
from . import pipelines as P

log = logging.getLogger("csgd")

EXIT_OK, EXIT_INVALID, EXIT_EQUIVALENCE = 0, 1, 2


def _config(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _base(args, cfg, data):
    if getattr(args, "base", None):
        return load_checkpoint(args.base)
    log.info("no --base given; training a baseline first")
    return P.train_baseline(cfg, data).model


def cmd_train(args) -> dict:
    cfg = _config(args)
    res = P.train_baseline(cfg)
    return {"test_accuracy": res.test_accuracy, "train_accuracy": res.train_accuracy}


def cmd_prune(args) -> dict:
    cfg = _config(args)
    data = P.load_data(cfg)
    res = P.prune_pretrained(cfg, _base(args, cfg, data), data)
    s = res.summary()
    return {k: s[k] for k in ("base_accuracy", "pre_trim_accuracy", "post_trim_accuracy",
                              "equivalence", "steps", "flops_before", "flops_after")}


def cmd_trim(args) -> dict:
    cfg = _config(args)
    data = P.load_data(cfg)
    model = load_checkpoint(args.checkpoint)
    clusters = read_manifest(args.checkpoint)["extra"].get("clusters")
    if args.clusters:
        clusters = json.loads(Path(args.clusters).read_text())
    if not clusters:
        raise ValueError("no clusters in the checkpoint and no --clusters file given")
    assignment = ClusterAssignment.from_dict(clusters)
    trimmed, dev, gap, snap_gap = P.snap_trim_verify(model, assignment, data, cfg)
    out = Path(cfg.out) / "trim"
    save_checkpoint(out / "checkpoint", trimmed, {"clusters": assignment.to_dict()})
    summary = {"max_deviation": dev, "equivalence": gap, "snap_gap": snap_gap,
               "accuracy": accuracy(trimmed, data.test.images, data.test.labels)}
    write_summary(out / "summary.json", summary)
    return summary


def cmd_eval(args) -> dict:
    cfg = _config(args)
    data = P.load_data(cfg)
    model = load_checkpoint(args.checkpoint)
    return {"test_accuracy": accuracy(model, data.test.images, data.test.labels)}


def cmd_scale_squeeze(args) -> dict:
    b, w, s = P.scale_and_squeeze(_config(args)).triple()
    return {"baseline_accuracy": b, "wide_accuracy": w, "squeezed_accuracy": s}


def cmd_compare_lasso(args) -> dict:
    cfg = _config(args)
    data = P.load_data(cfg)
    res = P.compare_lasso(cfg, _base(args, cfg, data), data)
    return {"csgd_drop": res.csgd_drop, "lasso_drop": res.lasso_drop,
            "lasso_before": res.lasso_before, "lasso_after": res.lasso_after}


def cmd_sweep_eps(args) -> dict:
    cfg = _config(args)
    data = P.load_data(cfg)
    arms = P.epsilon_sweep(cfg, _base(args, cfg, data), data)
    return {f"{a.eps:g}": a.crossing_step for a in arms}


def cmd_slim_vs_clip(args) -> dict:
    cfg = _config(args)
    data = P.load_data(cfg)
    res = P.slim_vs_clip(cfg, _base(args, cfg, data), data)
    return {"slim_accuracy": res.slim.post_trim_accuracy, "clip_accuracy": res.clip.post_trim_accuracy,
            "slim_flops": res.slim.flops_after, "clip_flops": res.clip.flops_after,
            "flops_mismatch": res.flops_mismatch}


def cmd_verify(args) -> dict:
    a = load_checkpoint(args.first)
    b = load_checkpoint(args.second)
    gap = P.verify_equivalence(a, b, args.samples, args.seed or 0)
    print(f"max logit difference: {gap:.3e}")
    if not gap <= args.tolerance:
        raise P.EquivalenceError(f"max logit difference {gap:.3e} exceeds {args.tolerance:g}")
    return {"max_logit_difference": gap}


COMMANDS = {
    "train": (cmd_train, "train a baseline with plain SGD"),
    "prune": (cmd_prune, "C-SGD prune a pretrained checkpoint"),
    "trim": (cmd_trim, "snap and trim a C-SGD-trained checkpoint"),
    "eval": (cmd_eval, "test accuracy of a checkpoint"),
    "scale-squeeze": (cmd_scale_squeeze, "train wide, squeeze back to the configured widths"),
    "compare-lasso": (cmd_compare_lasso, "C-SGD against group-Lasso zero-out pruning"),
    "sweep-eps": (cmd_sweep_eps, "threshold-crossing step per centripetal strength"),
    "slim-vs-clip": (cmd_slim_vs_clip, "uniform slimming against internal-only clipping"),
    "verify": (cmd_verify, "max logit difference between two checkpoints"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csgd", description="Centripetal SGD filter pruning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None)
        if name == "verify":
            p.add_argument("first")
            p.add_argument("second")
            p.add_argument("--tolerance", type=float, default=1e-4)
            p.add_argument("--samples", type=int, default=100)
            p.add_argument("--config", default=None)
            p.add_argument("--out", default=None)
            continue
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        if name in ("prune", "compare-lasso", "sweep-eps", "slim-vs-clip"):
            p.add_argument("--base", default=None, help="pretrained checkpoint directory")
        if name in ("trim", "eval"):
            p.add_argument("--checkpoint", required=True)
        if name == "trim":
            p.add_argument("--clusters", default=None, help="JSON cluster file")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        result = fn(args)
    except P.EquivalenceError as e:
        print(f"equivalence gate failed: {e}", file=sys.stderr)
        return EXIT_EQUIVALENCE
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
