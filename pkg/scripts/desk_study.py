"""Desk-scale distillation study on the synthetic task.

Trains the full-parameter teacher, then the shared MoE student twice (with and
without the distillation term), and reports token error rates and the
per-transformation L2 profile of every model.

    python3 scripts/desk_study.py --out runs/desk [--epochs N]

About two minutes on one CPU core with the default settings.
"""
import argparse
import dataclasses
import os
import time

import numpy as np

from sharemoe.config import load_config
from sharemoe.data import synth_dataset
from sharemoe.encoder import count_params, l2_distance_profile, profile_csv
from sharemoe.tensor import Tensor
from sharemoe.train import evaluate, load_model, train

CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs", "desk")


def run(name, cfg_file, out, train_dir, epochs, teacher=None, beta=None):
    over = {"train.out_dir": os.path.join(out, name), "train.data": train_dir}
    if epochs:
        over["train.epochs"] = epochs
    cfg = load_config(os.path.join(CONFIGS, cfg_file), over)
    if beta is not None:
        cfg.loss = dataclasses.replace(cfg.loss, beta=beta)
    t0 = time.perf_counter()
    res = train(cfg, teacher=teacher if cfg.loss.beta > 0 else None)
    print(f"{name}: {len(res.rows)} steps in {time.perf_counter() - t0:.0f}s, final nll {res.rows[-1]['nll']:.4f}")
    return res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=0, help="override every config's epoch count")
    ap.add_argument("--n-test", type=int, default=64)
    args = ap.parse_args()

    base = load_config(os.path.join(CONFIGS, "teacher.cfg"))
    train_dir, test_dir = os.path.join(args.out, "data", "train"), os.path.join(args.out, "data", "test")
    synth_dataset(base.synthetic_spec, base.synth.n_utts, base.synth.seed, train_dir)
    test = synth_dataset(base.synthetic_spec, args.n_test, base.synth.seed + 1, test_dir)

    teacher_res = run("teacher", "teacher.cfg", args.out, train_dir, args.epochs)
    teacher = load_model(teacher_res.checkpoint)
    runs = {
        "teacher": teacher_res,
        "student_kd": run("student_kd", "student.cfg", args.out, train_dir, args.epochs, teacher),
        "student_nokd": run("student_nokd", "student.cfg", args.out, train_dir, args.epochs, beta=0.0),
    }

    print(f"\n{'model':<14}{'N_pe':>10}{'TER':>8}")
    for name, res in runs.items():
        model = load_model(res.checkpoint)
        ter, _ = evaluate(model.params, model.cfg, test, model.cfg.eval.beam)
        print(f"{name:<14}{count_params(model.cfg.encoder).total:>10,}{ter:>8.3f}")
        x = Tensor(np.asarray(test[0].feats, dtype=model.params.encoder.frontend.out_w.dtype)[None])
        rows = l2_distance_profile(x, model.cfg.encoder, model.params.encoder)
        with open(os.path.join(args.out, f"{name}_l2.csv"), "w") as fh:
            fh.write(profile_csv(rows))
    print(f"\nL2 profiles written to {args.out}/*_l2.csv")


if __name__ == "__main__":
    main()
