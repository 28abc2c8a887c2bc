#!/usr/bin/env python3
"""Does eval cost follow input difficulty?

Trains the desk network on synthetic gratings where every other sample is
noisy, then compares mean held-out FLOPs of the noisy and clean halves.
"""

import argparse
import csv

from iamnn.experiments import adaptivity


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--tau", type=float, default=0.05)
    ap.add_argument("--level", type=float, default=0.6, help="noise level of the noisy half")
    ap.add_argument("--csv", metavar="PATH")
    args = ap.parse_args()
    results = []
    for seed in args.seeds:
        r = adaptivity(seed, args.steps, args.tau, args.level)
        results.append(r)
        print(f"seed {seed}: acc {r.accuracy:.3f}  noisy {r.noisy_flops:,.0f}  clean {r.clean_flops:,.0f}  "
              f"N noisy {[round(v, 2) for v in r.noisy_iterations]}  N clean {[round(v, 2) for v in r.clean_iterations]}")
    wins = sum(r.noisy_flops > r.clean_flops for r in results)
    print(f"noisy samples cost more in {wins}/{len(results)} seeds")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "accuracy", "noisy_flops", "clean_flops", "min_flops", "max_flops"])
            for r in results:
                w.writerow([r.seed, r.accuracy, r.noisy_flops, r.clean_flops, r.min_flops, r.max_flops])


if __name__ == "__main__":
    main()
