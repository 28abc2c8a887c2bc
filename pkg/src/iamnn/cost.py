"""Analytic FLOPs accounting for IamNN and reference ResNets.

Counting conventions
--------------------
* convolution / linear: ``flops_per_mac`` per multiply-accumulate.  The
  default of 1 is the convention of published ResNet costs (a 152-layer
  ResNet is "11.5 GFLOPs" with one FLOP per multiply-add); pass 2 to count
  the multiply and the add separately.
* batchnorm: 2 per element, ReLU: 1 per element, max pooling:
  window-size per output element, elementwise add: 1 per element,
  global average pooling: 1 per input element, linear bias: 1 per output.
* The halting head is counted once per executed iteration and reported in
  its own bucket so it can be excluded.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .block import BlockTrace
from .errors import ContractError
from .network import STEM_POOL, NetConfig, RESNETS, resnet_stem_kernel, resnet_units


def conv_flops(c_in: int, c_out: int, kernel: int, h_out: int, w_out: int, flops_per_mac: int = 1) -> int:
    return flops_per_mac * c_out * c_in * kernel * kernel * h_out * w_out


def linear_flops(n_in: int, n_out: int, flops_per_mac: int = 1, bias: bool = True) -> int:
    return flops_per_mac * n_in * n_out + (n_out if bias else 0)


def bn_flops(elements: int) -> int:
    return 2 * elements


def pool_flops(window: int, out_elements: int) -> int:
    return window * out_elements


@dataclass(frozen=True)
class FlopsBreakdown:
    stem: int
    transitions: tuple[int, ...]  # per block: downsampling pool, entry projection, output add
    iteration: tuple[int, ...]  # per block: cost of one iteration of the processing block
    act_head: tuple[int, ...]  # per block: cost of one halting-score evaluation
    iterations: tuple[int, ...]
    classifier: int
    conv_macs: int
    linear_macs: int
    flops_per_mac: int = 1

    @property
    def blocks(self) -> int:
        return sum(n * c for n, c in zip(self.iterations, self.iteration))

    @property
    def act(self) -> int:
        return sum(n * c for n, c in zip(self.iterations, self.act_head))

    @property
    def total(self) -> int:
        return self.stem + sum(self.transitions) + self.blocks + self.act + self.classifier

    @property
    def conv(self) -> int:
        return self.flops_per_mac * self.conv_macs

    def as_dict(self) -> dict:
        return {
            "stem": self.stem,
            "transitions": list(self.transitions),
            "iteration_cost": list(self.iteration),
            "act_head_cost": list(self.act_head),
            "iterations": list(self.iterations),
            "blocks": self.blocks,
            "act": self.act,
            "classifier": self.classifier,
            "conv_macs": self.conv_macs,
            "linear_macs": self.linear_macs,
            "flops_per_mac": self.flops_per_mac,
            "total": self.total,
        }


def _resolve_iterations(cfg: NetConfig, iteration_counts) -> tuple[int, ...]:
    caps = cfg.max_iterations
    if isinstance(iteration_counts, str):
        if iteration_counts == "max":
            return tuple(caps)
        if iteration_counts == "min":
            return (1,) * len(caps)
        raise ContractError(f"iteration_counts must be 'min', 'max' or a sequence, got {iteration_counts!r}")
    counts = tuple(int(n) for n in iteration_counts)
    if len(counts) != len(caps):
        raise ContractError(f"expected {len(caps)} iteration counts, got {len(counts)}")
    for n, m in zip(counts, caps):
        if not 1 <= n <= m:
            raise ContractError(f"iteration count {n} outside [1, {m}]")
    return counts


def count_flops(cfg: NetConfig, iteration_counts="max", flops_per_mac: int = 1) -> FlopsBreakdown:
    """FLOPs of one sample that runs ``iteration_counts[b]`` iterations in block ``b``."""
    counts = _resolve_iterations(cfg, iteration_counts)
    fpm = flops_per_mac
    c_in, H, W = cfg.input_shape
    st = cfg.stem
    sizes = cfg.block_sizes()

    from .ops import conv_output_size

    h = conv_output_size(H, st.kernel, st.stride, st.padding)
    w = conv_output_size(W, st.kernel, st.stride, st.padding)
    conv_macs = st.out_channels * c_in * st.kernel**2 * h * w
    stem = fpm * conv_macs + bn_flops(st.out_channels * h * w) + st.out_channels * h * w
    if st.use_maxpool:
        k = STEM_POOL[0]
        h, w = (conv_output_size(v, *STEM_POOL) for v in (h, w))
        stem += pool_flops(k * k, st.out_channels * h * w)

    transitions, iteration, act_head = [], [], []
    linear_macs = 0
    c_prev = st.out_channels
    for i, (bc, (h, w), n) in enumerate(zip(cfg.blocks, sizes, counts)):
        C, b, hid = bc.channels, bc.bottleneck_channels, bc.act_hidden
        hw = h * w
        fixed = pool_flops(4, c_prev * hw) if i else 0
        entry_macs = C * c_prev * hw
        fixed += fpm * entry_macs + bn_flops(C * hw) + C * hw + C * hw
        iter_macs = (2 * C * b + 9 * b * b + b * C) * hw
        per_iter = fpm * iter_macs
        per_iter += bn_flops(b * hw) + b * hw + bn_flops(b * hw) + b * hw + bn_flops(C * hw)
        per_iter += C * hw + 2 * C * hw  # state update, weighted accumulation
        act_macs = 3 * C * hid + hid * hid + hid
        act = 3 * C * hw + fpm * act_macs + (hid + hid + 1) + 2 * hid + 1
        transitions.append(fixed)
        iteration.append(per_iter)
        act_head.append(act)
        conv_macs += entry_macs + n * iter_macs
        linear_macs += n * act_macs
        c_prev = C

    h, w = sizes[-1]
    head_macs = c_prev * cfg.num_classes
    classifier = c_prev * h * w + fpm * head_macs + cfg.num_classes
    linear_macs += head_macs
    return FlopsBreakdown(
        stem, tuple(transitions), tuple(iteration), tuple(act_head), counts, classifier, conv_macs, linear_macs, fpm
    )


def count_flops_resnet(reference: str, input_size: int = 224, flops_per_mac: int = 1, num_classes: int | None = None) -> int:
    """FLOPs of a standard reference ResNet under the same conventions as :func:`count_flops`."""
    from .ops import conv_output_size

    spec = RESNETS[reference] if reference in RESNETS else None
    fpm = flops_per_mac
    k = resnet_stem_kernel(input_size)
    stride = 1 if k == 3 else 2
    s = conv_output_size(input_size, k, stride, k // 2)
    total = conv_flops(3, 64, k, s, s, fpm) + bn_flops(64 * s * s) + 64 * s * s
    if k == 7:
        s = conv_output_size(s, *STEM_POOL)
        total += pool_flops(9, 64 * s * s)
    c_last = 64
    for c_in, width, c_out, stride, size in resnet_units(reference, input_size):
        so = conv_output_size(size, 3, stride, 1)
        if spec.bottleneck:
            total += conv_flops(c_in, width, 1, size, size, fpm) + bn_flops(width * size * size) + width * size * size
            total += conv_flops(width, width, 3, so, so, fpm) + bn_flops(width * so * so) + width * so * so
            total += conv_flops(width, c_out, 1, so, so, fpm) + bn_flops(c_out * so * so)
        else:
            total += conv_flops(c_in, width, 3, so, so, fpm) + bn_flops(width * so * so) + width * so * so
            total += conv_flops(width, width, 3, so, so, fpm) + bn_flops(width * so * so)
        if stride != 1 or c_in != c_out:
            total += conv_flops(c_in, c_out, 1, so, so, fpm) + bn_flops(c_out * so * so)
        total += 2 * c_out * so * so  # residual add, ReLU
        c_last, s = c_out, so
    classes = spec.num_classes if num_classes is None else num_classes
    return total + c_last * s * s + linear_flops(c_last, classes, fpm)


@dataclass
class CostReport:
    """Per-sample FLOPs with aggregate statistics and iteration histograms."""

    ids: np.ndarray
    n_iters: np.ndarray  # [samples, blocks]
    totals: np.ndarray  # [samples]
    max_iterations: tuple[int, ...]
    unit: FlopsBreakdown = field(repr=False)

    def __len__(self):
        return len(self.totals)

    @property
    def min(self) -> int:
        return int(self.totals.min())

    @property
    def max(self) -> int:
        return int(self.totals.max())

    @property
    def mean(self) -> float:
        return float(self.totals.mean())

    def block_costs(self) -> np.ndarray:
        """Per-sample, per-block processing cost (iterations times unit cost)."""
        return self.n_iters * np.asarray(self.unit.iteration, dtype=np.int64)

    def act_costs(self) -> np.ndarray:
        return self.n_iters * np.asarray(self.unit.act_head, dtype=np.int64)

    def histograms(self) -> list[np.ndarray]:
        """Count of samples per iteration count, index ``n - 1``, one array per block."""
        return [np.bincount(self.n_iters[:, b] - 1, minlength=m) for b, m in enumerate(self.max_iterations)]

    def merge(self, other: "CostReport") -> "CostReport":
        if other.max_iterations != self.max_iterations:
            raise ContractError("cannot merge reports of different configurations")
        return CostReport(
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.n_iters, other.n_iters]),
            np.concatenate([self.totals, other.totals]),
            self.max_iterations,
            self.unit,
        )

    def summary(self) -> dict:
        return {
            "samples": len(self),
            "flops_min": self.min,
            "flops_mean": self.mean,
            "flops_max": self.max,
            "flops_per_mac": self.unit.flops_per_mac,
            "mean_iterations": [float(v) for v in self.n_iters.mean(axis=0)],
            "histograms": [h.tolist() for h in self.histograms()],
            "act_head_flops_mean": float(self.act_costs().sum(axis=1).mean()),
        }

    def write_csv(self, path) -> None:
        nb = self.n_iters.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", *[f"n_block{b + 1}" for b in range(nb)], "flops"])
            for sid, n, tot in zip(self.ids, self.n_iters, self.totals):
                out.writerow([sid, *n.tolist(), int(tot)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


def attach_costs(traces, cfg: NetConfig, ids=None, flops_per_mac: int = 1) -> CostReport:
    """Turn per-block halting traces into per-sample FLOPs.

    ``traces`` is a list over blocks; each entry is a :class:`BlockTrace` or
    an array/list of per-sample iteration counts.
    """
    if len(traces) != len(cfg.blocks):
        raise ContractError(f"got traces for {len(traces)} blocks, network has {len(cfg.blocks)}")
    cols = [t.n_iters if isinstance(t, BlockTrace) else np.asarray(t, dtype=np.int64) for t in traces]
    sizes = {len(c) for c in cols}
    if len(sizes) != 1:
        raise ContractError("every block trace must cover the same samples")
    n_iters = np.stack(cols, axis=1).astype(np.int64)
    unit = count_flops(cfg, "min", flops_per_mac)
    caps = np.asarray(cfg.max_iterations)
    if (n_iters < 1).any() or (n_iters > caps).any():
        raise ContractError("iteration counts outside [1, max_iterations]")
    per_iter = np.asarray(unit.iteration, dtype=np.int64) + np.asarray(unit.act_head, dtype=np.int64)
    fixed = unit.stem + sum(unit.transitions) + unit.classifier
    totals = fixed + n_iters @ per_iter
    ids = np.arange(len(n_iters)) if ids is None else np.asarray(ids)
    return CostReport(ids, n_iters, totals, tuple(int(m) for m in caps), unit)
