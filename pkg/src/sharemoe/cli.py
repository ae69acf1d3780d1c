"""Command-line entry point: ``sharemoe <subcommand> --config <path> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetError, load_dataset, synth_dataset
from .encoder import count_params, l2_distance_profile, profile_csv
from .tensor import Tensor
from .train import TrainingDiverged, distill_train, evaluate, load_model, train


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = args.seed
        if args.command == "synth-data":
            out = {"synth.seed": args.seed}
    return out


def cmd_synth_data(args, cfg: ExperimentConfig) -> int:
    out_dir = args.out or cfg.synth.out_dir
    n = args.n_utts or cfg.synth.n_utts
    utts = synth_dataset(cfg.synthetic_spec, n, cfg.synth.seed, out_dir)
    print(f"wrote {len(utts)} utterances to {out_dir}")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    res = train(cfg)
    print(f"metrics: {res.metrics}\ncheckpoint: {res.checkpoint}")
    return 0


def cmd_distill(args, cfg: ExperimentConfig) -> int:
    res = distill_train(cfg)
    print(f"metrics: {res.metrics}\ncheckpoint: {res.checkpoint}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model = load_model(args.checkpoint, expect_cfg=cfg)
    utts = load_dataset(args.data or cfg.eval.data)
    ter, hyps = evaluate(model.params, model.cfg, utts, args.beam or cfg.eval.beam, cfg.eval.max_len)
    if args.hyps:
        with open(args.hyps, "w") as fh:
            fh.writelines(h.line() + "\n" for h in hyps)
    print(f"token_error_rate={ter!r}")
    return 0


def cmd_count_params(args, cfg: ExperimentConfig) -> int:
    report = count_params(cfg.encoder)
    e = cfg.encoder
    title = f"C={e.n_blocks} G={e.n_groups} E={e.n_experts} d={e.d_model} d_ff={e.d_ff}"
    print(report.kv() if args.format == "kv" else report.table(title))
    return 0


def cmd_l2_curve(args, cfg: ExperimentConfig) -> int:
    model = load_model(args.checkpoint, expect_cfg=cfg)
    utts = load_dataset(args.data or cfg.train.data)
    if not 0 <= args.utt < len(utts):
        raise IndexError(f"--utt {args.utt} out of range for {len(utts)} utterances")
    feats = utts[args.utt].feats
    dtype = model.params.encoder.frontend.out_w.dtype
    rows = l2_distance_profile(Tensor(np.asarray(feats, dtype=dtype)[None]), model.cfg.encoder,
                               model.params.encoder)
    sys.stdout.write(profile_csv(rows))
    return 0


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "distill": cmd_distill, "eval": cmd_eval,
            "count-params": cmd_count_params, "l2-curve": cmd_l2_curve}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharemoe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config (section.key = value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("synth-data", "write a synthetic dataset")
    p.add_argument("--out", help="output directory (default: synth.out_dir)")
    p.add_argument("--n-utts", type=int, default=0)
    add("train", "train a model")
    add("distill", "train a student against a frozen teacher encoder")
    p = add("eval", "beam-search decode and report token error rate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: eval.data)")
    p.add_argument("--beam", type=int, default=0)
    p.add_argument("--hyps", help="write hypotheses (id<TAB>tokens<TAB>score) to this file")
    p = add("count-params", "encoder parameter accounting")
    p.add_argument("--format", choices=["table", "kv"], default="table")
    p = add("l2-curve", "per-transformation L2 distances for one utterance, as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: train.data)")
    p.add_argument("--utt", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DatasetError, CheckpointError, TrainingDiverged, IndexError, ValueError,
            RuntimeError, OSError) as e:
        print(f"sharemoe {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
