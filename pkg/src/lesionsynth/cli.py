"""Command line entry point: ``lesionsynth <command> --config cfg.yaml --out DIR``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import load_config

log = logging.getLogger("lesionsynth")


def _label_path(text):
    if "=" in text:
        label, path = text.split("=", 1)
        return label, path
    return Path(text).parent.name or Path(text).stem, text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesionsynth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    add("make-phantoms", "generate a phantom dataset directory")
    sp = add("train-synth", "train the dual-cycle synthesis model")
    sp.add_argument("--dataset", required=True)
    sp = add("synthesize", "apply a trained synthesis model to a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--direction", choices=["h2p", "p2h"], default="h2p")
    sp = add("train-detect", "train the candidate classifier for one data arm")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--synthetic", help="synthetic dataset directory (synthetic/combined arms)")
    sp.add_argument("--arm", choices=list(ex.ARMS), required=True)
    sp.add_argument("--cda", action="store_true", help="enable classical data augmentation")
    sp = add("detect", "run FRST + classifier on the held-out test subjects")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp = add("evaluate", "FROC with bootstrap CI and the comparison table")
    sp.add_argument("--detections", action="append", required=True, type=_label_path,
                    help="detections CSV, optionally LABEL=PATH; repeatable")
    sp.add_argument("--ground-truth", required=True)
    add("run-experiment", "all stages and the six-arm report")
    return p


def run(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out)
    cmd = args.command
    if cmd == "make-phantoms":
        print(ex.cmd_make_phantoms(cfg, out))
    elif cmd == "train-synth":
        print(ex.cmd_train_synth(cfg, args.dataset, out))
    elif cmd == "synthesize":
        print(ex.cmd_synthesize(cfg, args.dataset, args.checkpoint, args.direction, out))
    elif cmd == "train-detect":
        print(ex.cmd_train_detect(cfg, args.dataset, args.arm, args.cda, out, synthetic_dir=args.synthetic))
    elif cmd == "detect":
        print(ex.cmd_detect(cfg, args.dataset, args.checkpoint, out))
    elif cmd == "evaluate":
        _print_rows(ex.cmd_evaluate(cfg, args.detections, args.ground_truth, out))
    elif cmd == "run-experiment":
        _print_rows(ex.cmd_run_experiment(cfg, out))
    return 0


def _print_rows(rows):
    if not rows:
        return
    keys = list(rows[0])
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.3f}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except Exception as exc:  # every failure becomes a diagnostic and a nonzero exit
        if args.verbose:
            log.exception("command failed")
        print(f"lesionsynth {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
