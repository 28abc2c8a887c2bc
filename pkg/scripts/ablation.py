#!/usr/bin/env python3
"""Held-out accuracy with one iteration per block against two, same budget and seeds."""

import argparse

from iamnn.experiments import ABLATION, ablation_table, mean


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--caps", type=int, nargs="+", default=[1, 2])
    for key, value in ABLATION.items():
        ap.add_argument(f"--{key.replace('_', '-')}", type=type(value), default=value)
    args = ap.parse_args()
    kw = {k: getattr(args, k) for k in ABLATION}
    table = ablation_table(tuple(args.seeds), tuple(args.caps), **kw)
    for m, accs in table.items():
        print(f"M={m}: mean {mean(accs):.4f}  per seed {[round(a, 4) for a in accs]}")


if __name__ == "__main__":
    main()
