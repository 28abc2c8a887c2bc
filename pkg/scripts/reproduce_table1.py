#!/usr/bin/env python3
"""Analytic parameter and FLOPs counts for the IamNN presets and reference ResNets.

Prints a table and optionally writes it as JSON.  The IamNN FLOPs range is
reported from N=1 in every block (min) to N=M (max).
"""

import argparse
import json

from iamnn.cost import count_flops, count_flops_resnet
from iamnn.network import cifar_config, count_params, count_params_resnet, imagenet_config

# figures as published, for side-by-side display only
PUBLISHED = {
    "resnet18 @224": (12e6, 1.8e9),
    "resnet152 @224": (60e6, 11.5e9),
    "resnet101 @32": (42e6, 2.5e9),
    "iamnn imagenet @224": (5e6, 9e9),  # 5 M, range 2.5G - 9G
    "iamnn cifar @32": (4.5e6, None),
}


def rows(flops_per_mac: int):
    out = []
    for name, ref, size in (("resnet18", "resnet18", 224), ("resnet152", "resnet152", 224), ("resnet101", "resnet101", 32)):
        key = f"{name} @{size}"
        out.append({
            "model": key,
            "params": count_params_resnet(ref, input_size=size),
            "flops": count_flops_resnet(ref, size, flops_per_mac),
            "published": PUBLISHED[key],
        })
    for name, cfg in (("iamnn imagenet @224", imagenet_config()), ("iamnn cifar @32", cifar_config())):
        out.append({
            "model": name,
            "params": count_params(cfg).total,
            "flops": [count_flops(cfg, "min", flops_per_mac).total, count_flops(cfg, "max", flops_per_mac).total],
            "caps": cfg.max_iterations,
            "published": PUBLISHED[name],
        })
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flops-per-mac", type=int, default=1, choices=(1, 2))
    ap.add_argument("--json", metavar="PATH")
    args = ap.parse_args()
    table = rows(args.flops_per_mac)
    print(f"{'model':<22}{'params':>12}{'FLOPs':>24}{'published':>22}")
    for r in table:
        flops = r["flops"]
        f = f"{flops[0] / 1e9:.2f}G - {flops[1] / 1e9:.2f}G" if isinstance(flops, list) else f"{flops / 1e9:.2f}G"
        pub = r.get("published")
        p = " / ".join(txt for txt in (f"{pub[0] / 1e6:.1f}M" if pub[0] else "",
                                        f"{pub[1] / 1e9:.1f}G" if pub[1] else "") if txt)
        print(f"{r['model']:<22}{r['params'] / 1e6:>11.2f}M{f:>24}{p:>22}")
    ours, ref = table[3]["params"], table[1]["params"]
    print(f"\nparameter reduction vs resnet152: {100 * (1 - ours / ref):.1f}%")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
