"""Encoder parameter counts for the reference configurations at d_model=256.

    python3 scripts/param_table.py [--breakdown]
"""
import argparse

from sharemoe.encoder import EncoderConfig, count_params

DIMS = dict(d_model=256, heads=4, kernel=15, d_ff=1024, feat_dim=80)
ROWS = [  # name, (C, G, E), reference size in millions
    ("C12", (12, 1, 1), 21.58),
    ("C2", (2, 1, 1), 3.74),
    ("C2-MoE4", (2, 1, 4), 6.89),
    ("C1", (1, 1, 1), 1.95),
    ("C1-MoE4", (1, 1, 4), 3.53),
    ("C1-MoE4-G12", (1, 12, 4), 3.59),
    ("C2-MoE4-G6", (2, 6, 4), 6.95),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--breakdown", action="store_true", help="print per-category counts for each row")
    args = ap.parse_args()
    print(f"{'model':<13}{'ours':>12}{'reference':>12}{'rel dev':>9}")
    for name, (C, G, E), ref in ROWS:
        report = count_params(EncoderConfig(n_blocks=C, n_groups=G, n_experts=E, **DIMS))
        n = report.total
        print(f"{name:<13}{n:>12,}{ref * 1e6:>12,.0f}{(n / 1e6 - ref) / ref:>+9.2%}")
        if args.breakdown:
            print(report.table(name))


if __name__ == "__main__":
    main()
