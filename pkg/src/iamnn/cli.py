"""``iamnn`` command line: train, eval, count and analyze.

Flags given on the command line override the config file.  ``IAMNN_THREADS``
caps BLAS worker threads (default 1, which keeps runs bitwise repeatable).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .cost import count_flops, count_flops_resnet
from .data import Dataset, gen_synthetic, load_cifar_binary
from .errors import CheckpointError, ConfigError, DataFormatError, DivergenceError
from .network import RESNETS, count_params, count_params_resnet, init_params
from .training import evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("iamnn")


class UsageError(Exception):
    """Bad input that should end the process with exit code 2."""


def _run_config(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        run.train.seed = args.seed
    if getattr(args, "max_steps", None) is not None:
        run.train.max_steps = args.max_steps
    if getattr(args, "tau", None) is not None:
        if args.tau < 0:
            raise ConfigError("--tau must be >= 0", key="act_tau")
        run.train.act_tau = args.tau
    return run


def _datasets(run: RunConfig, data_dir) -> tuple[Dataset, Dataset]:
    """Training and held-out split; held-out data reuses the training normalization."""
    d = run.data
    if d.source == "synthetic":
        tr = gen_synthetic(d.synthetic_spec(run.net, d.seed))
        va = gen_synthetic(d.synthetic_spec(run.net, d.val_seed), normalization=(tr.mean, tr.std))
        return tr, va
    if data_dir is None:
        raise UsageError(f"data source {d.source} needs --data-dir")
    path = Path(data_dir)
    if not path.exists():
        raise UsageError(f"dataset path does not exist: {path}")
    try:
        tr = load_cifar_binary(path, d.source, "train")
        va = load_cifar_binary(path, d.source, "test", normalization=(tr.mean, tr.std))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if tr.shape != run.net.input_shape:
        raise ConfigError(f"dataset images are {tr.shape}, network expects {run.net.input_shape}",
                          key="net.input_size")
    return tr, va


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    run = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, va = _datasets(run, args.data_dir)
    result = train(run.net, run.train, tr, out_dir=out)
    save_checkpoint(out / "final.iamn", result.store, result.optimizer, result.steps,
                    rng_state={"seed": run.train.seed})
    ev = evaluate(result.store, va, run.net)
    last = result.history[-1] if result.history else None
    summary = {
        "steps": result.steps,
        "final_loss": last.loss if last else None,
        "final_batch_accuracy": last.accuracy if last else None,
        "eval": ev.summary(),
    }
    _write_json(out / "summary.json", summary)
    print(f"trained {result.steps} steps; held-out top1 {ev.top1:.4f}, mean FLOPs {ev.cost.mean:.4g}")
    return 0


def _load_model(args, run: RunConfig):
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    store = init_params(run.net) if args.config else None
    store, ck = load_checkpoint(args.checkpoint, store)
    run.net = store.cfg if store.cfg is not None else ck.net_config
    return store


def cmd_eval(args) -> int:
    run = _run_config(args)
    store = _load_model(args, run)
    _, va = _datasets(run, args.data_dir)
    ev = evaluate(store, va, run.net)
    summary = ev.summary()
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", summary)
        ev.cost.write_csv(out / "costs.csv")
    print(json.dumps(summary, sort_keys=True))
    return 0


def count_report(run: RunConfig, reference: str | None) -> dict:
    params = count_params(run.net)
    lo, hi = count_flops(run.net, "min"), count_flops(run.net, "max")
    report = {
        "params": params.as_dict(),
        "flops_min": lo.total,
        "flops_max": hi.total,
        "max_iterations": run.net.max_iterations,
    }
    if reference:
        size = run.net.input_shape[1]
        ref_params = count_params_resnet(reference, run.net.num_classes, size)
        ref_flops = count_flops_resnet(reference, size, num_classes=run.net.num_classes)
        report["reference"] = {
            "name": reference,
            "params": ref_params,
            "flops": ref_flops,
            "param_reduction": 1.0 - params.total / ref_params,
            "flops_reduction_min": 1.0 - lo.total / ref_flops,
            "flops_reduction_max": 1.0 - hi.total / ref_flops,
        }
    return report


def format_count_table(report: dict) -> str:
    rows = [(f"params.{k}", v) for k, v in report["params"].items()]
    rows += [("flops.min", report["flops_min"]), ("flops.max", report["flops_max"])]
    ref = report.get("reference")
    if ref:
        rows += [
            (f"{ref['name']}.params", ref["params"]),
            (f"{ref['name']}.flops", ref["flops"]),
            ("reduction.params", f"{100 * ref['param_reduction']:.2f}%"),
            ("reduction.flops_min", f"{100 * ref['flops_reduction_min']:.2f}%"),
            ("reduction.flops_max", f"{100 * ref['flops_reduction_max']:.2f}%"),
        ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v:>16}" for k, v in rows)


def cmd_count(args) -> int:
    run = _run_config(args)
    if args.input_size is not None:
        c = run.net.input_shape[0]
        run.net = type(run.net)(run.net.blocks, run.net.num_classes, (c, args.input_size, args.input_size),
                                run.net.stem)
    report = count_report(run, args.reference)
    print(format_count_table(report))
    print(json.dumps(report, sort_keys=True))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "count.json", report)
    return 0


def cmd_analyze(args) -> int:
    run = _run_config(args)
    store = _load_model(args, run)
    _, va = _datasets(run, args.data_dir)
    ev = evaluate(store, va, run.net)
    cost = ev.cost
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b, hist in enumerate(cost.histograms()):
        with open(out / f"iterations_block{b + 1}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iterations", "count"])
            w.writerows((n + 1, int(c)) for n, c in enumerate(hist))
    order = np.argsort(cost.totals, kind="stable")
    label_of = dict(zip(va.ids.tolist(), va.labels.tolist()))
    pred_of = dict(zip(va.ids.tolist(), ev.predictions.tolist()))
    nb = len(run.net.blocks)
    with open(out / "ranking.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "id", "label", "predicted", *[f"n_block{b + 1}" for b in range(nb)], "flops"])
        for rank, i in enumerate(order):
            sid = int(cost.ids[i])
            w.writerow([rank, sid, label_of[sid], pred_of[sid], *cost.n_iters[i].tolist(), int(cost.totals[i])])
    _write_json(out / "summary.json", ev.summary())
    print(json.dumps(ev.summary(), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iamnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=True, out_required=False):
        p.add_argument("--config", metavar="PATH", help="INI run configuration (defaults: desk preset)")
        p.add_argument("--seed", type=int, help="override train.seed")
        if data:
            p.add_argument("--data-dir", metavar="PATH", help="CIFAR binary directory or file")
        p.add_argument("--out-dir", metavar="PATH", required=out_required, help="directory for output files")

    p = sub.add_parser("train", help="train a network and write metrics, checkpoints and a summary")
    common(p, out_required=True)
    p.add_argument("--max-steps", type=int, help="override train.max_steps")
    p.add_argument("--tau", type=float, help="override train.act_tau (ponder cost weight)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and FLOPs of a checkpoint on held-out data")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint written by train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="parameter and FLOPs breakdown, optionally against a reference ResNet")
    common(p, data=False)
    p.add_argument("--reference", choices=sorted(RESNETS), help="reference ResNet to compare against")
    p.add_argument("--input-size", type=int, metavar="INT", help="square input resolution")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("analyze", help="iteration histograms and an easy-to-hard ranking of held-out samples")
    common(p, out_required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint written by train")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        threads = int(os.environ.get("IAMNN_THREADS", "1"))
    except ValueError:
        print("error: IAMNN_THREADS must be an integer", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, CheckpointError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
