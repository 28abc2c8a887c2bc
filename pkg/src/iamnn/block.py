"""Weight-shared iterative residual block with adaptive computation time.

One block owns a single bottleneck processing function ``F`` that is applied
repeatedly.  Iteration ``i`` feeds ``concat(x0, s[i-1])`` through ``F`` and
adds the result to the state buffer ``s``.  A small halting head scores every
iteration; the scores are turned into weights that sum to one, and the block
emits ``x0 + sum_i w_i * s_i``.

Samples stop independently.  At each iteration only the samples that have
not halted are run, so halted samples neither cost compute nor contribute to
later batchnorm statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, NumericOverflowError, ShapeError
from .ops import BNState
from .tensor import Tensor, default_dtype


@dataclass
class BlockConfig:
    channels: int
    max_iterations: int
    bottleneck_channels: int | None = None
    act_hidden: int = 64
    act_epsilon: float = 0.01
    act_activation: str = "relu"
    act_bias_init: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}", key="channels")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}", key="max_iterations")
        if self.bottleneck_channels is None:
            self.bottleneck_channels = max(1, self.channels // 4)
        if self.bottleneck_channels < 1:
            raise ConfigError("bottleneck_channels must be >= 1", key="bottleneck_channels")
        if self.act_hidden < 1:
            raise ConfigError("act_hidden must be >= 1", key="act_hidden")
        if not 0.0 < self.act_epsilon < 1.0:
            raise ConfigError(f"act_epsilon must lie in (0, 1), got {self.act_epsilon}", key="act_epsilon")
        if self.act_activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown act_activation {self.act_activation!r}", key="act_activation")


@dataclass
class HaltingTrace:
    """Halting record of one sample in one block."""

    scores: list[float]
    weights: list[float]
    n_iters: int
    remainder: float

    @property
    def ponder(self) -> float:
        return self.n_iters + self.remainder


def halting_rule(scores, max_iterations: int, epsilon: float = 0.01) -> HaltingTrace:
    """Consume halting scores until their running sum reaches ``1 - epsilon``.

    The last executed iteration receives the remainder ``1 - sum(previous)``
    so the weights always sum to one; ``max_iterations`` caps the count.
    Only as many scores as needed are read from ``scores``.
    """
    if max_iterations < 1:
        raise ContractError("max_iterations must be >= 1")
    taken: list[float] = []
    cumulative = 0.0
    for h in scores:
        h = float(h)
        taken.append(h)
        if cumulative + h >= 1.0 - epsilon or len(taken) == max_iterations:
            remainder = 1.0 - cumulative
            return HaltingTrace(taken, taken[:-1] + [remainder], len(taken), remainder)
        cumulative += h
    if not taken:
        raise ContractError("halting_rule needs at least one score")
    raise ContractError(f"score stream ended after {len(taken)} scores before halting")


def _trace_from_scores(scores: list[float]) -> HaltingTrace:
    remainder = 1.0 - float(np.sum(scores[:-1]))
    return HaltingTrace(list(scores), list(scores[:-1]) + [remainder], len(scores), remainder)


@dataclass
class BlockParams:
    in_channels: int
    entry_conv: Tensor
    entry_bn: BNState
    conv1: Tensor
    conv2: Tensor
    conv3: Tensor
    bn: list[tuple[BNState, BNState, BNState]]
    act: list[tuple[Tensor, Tensor]]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.entry.conv", self.entry_conv
        yield f"{prefix}.entry.bn.gamma", self.entry_bn.gamma
        yield f"{prefix}.entry.bn.beta", self.entry_bn.beta
        yield f"{prefix}.F.conv1", self.conv1
        yield f"{prefix}.F.conv2", self.conv2
        yield f"{prefix}.F.conv3", self.conv3
        for k, sets in enumerate(self.bn):
            for j, bn in enumerate(sets, start=1):
                yield f"{prefix}.bn.iter{k}.conv{j}.gamma", bn.gamma
                yield f"{prefix}.bn.iter{k}.conv{j}.beta", bn.beta
        for j, (w, b) in enumerate(self.act, start=1):
            yield f"{prefix}.act.fc{j}.weight", w
            yield f"{prefix}.act.fc{j}.bias", b

    def named_bn(self, prefix: str):
        yield f"{prefix}.entry.bn", self.entry_bn
        for k, sets in enumerate(self.bn):
            for j, bn in enumerate(sets, start=1):
                yield f"{prefix}.bn.iter{k}.conv{j}", bn

    def shared_weights(self) -> list[Tensor]:
        return [self.conv1, self.conv2, self.conv3]


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_block_params(cfg: BlockConfig, in_channels: int, rng: np.random.Generator, dtype=None) -> BlockParams:
    """Draw fresh block parameters.

    Random draws happen in a fixed order that does not depend on
    ``max_iterations`` (batchnorm sets are deterministic), so the shared
    weights are identical for any iteration cap under the same generator.
    """
    dtype = np.dtype(dtype or default_dtype())
    C, b, hid = cfg.channels, cfg.bottleneck_channels, cfg.act_hidden
    entry = _he(rng, (C, in_channels, 1, 1), dtype)
    conv1 = _he(rng, (b, 2 * C, 1, 1), dtype)
    conv2 = _he(rng, (b, b, 3, 3), dtype)
    conv3 = _he(rng, (C, b, 1, 1), dtype)
    act = []
    for fan_in, fan_out in ((3 * C, hid), (hid, hid), (hid, 1)):
        w = _uniform(rng, (fan_out, fan_in), fan_in, dtype)
        bias = _uniform(rng, (fan_out,), fan_in, dtype)
        act.append((w, bias))
    act[-1][1].data[:] = cfg.act_bias_init
    bn = [
        (BNState.create(b, dtype), BNState.create(b, dtype), BNState.create(C, dtype))
        for _ in range(cfg.max_iterations)
    ]
    return BlockParams(in_channels, entry, BNState.create(C, dtype), conv1, conv2, conv3, bn, act)


def processing(x: Tensor, params: BlockParams, iteration: int, train: bool) -> Tensor:
    """The shared bottleneck F, normalized with the statistics of ``iteration`` (0-based)."""
    bn1, bn2, bn3 = params.bn[iteration]
    h = ops.relu(ops.batchnorm(ops.conv2d(x, params.conv1), bn1, train))
    h = ops.relu(ops.batchnorm(ops.conv2d(h, params.conv2, padding=1), bn2, train))
    return ops.batchnorm(ops.conv2d(h, params.conv3), bn3, train)


def act_score(x0: Tensor, s_prev: Tensor, f: Tensor, head, activation: str = "relu") -> Tensor:
    """Halting score in (0, 1) per sample from pooled (state, input, update)."""
    if not (x0.shape == s_prev.shape == f.shape):
        raise ShapeError(f"act_score inputs disagree: {x0.shape}, {s_prev.shape}, {f.shape}")
    act_fn = ops.relu if activation == "relu" else ops.tanh
    v = ops.global_avg_pool(ops.concat_channels([s_prev, x0, f]))
    (w1, b1), (w2, b2), (w3, b3) = head
    h = act_fn(ops.linear(v, w1, b1))
    h = act_fn(ops.linear(h, w2, b2))
    return ops.sigmoid(ops.linear(h, w3, b3)).reshape(-1)


@dataclass
class BlockTrace:
    """Halting outcome of one block for a whole batch."""

    samples: list[HaltingTrace]
    remainder: Tensor  # [B], differentiable through the halting scores
    n_iters: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.samples)

    @property
    def ponder(self) -> np.ndarray:
        return np.array([t.ponder for t in self.samples])


def entry(x_in: Tensor, params: BlockParams, train: bool) -> Tensor:
    if x_in.ndim != 4 or x_in.shape[1] != params.in_channels:
        raise ShapeError(f"block expects {params.in_channels} input channels, got {x_in.shape}")
    return ops.relu(ops.batchnorm(ops.conv2d(x_in, params.entry_conv), params.entry_bn, train))


def block_forward(x_in: Tensor, params: BlockParams, cfg: BlockConfig, train: bool = False):
    """Run one iterative block; returns ``(y, BlockTrace)``."""
    x0 = entry(x_in, params, train)
    B = x0.shape[0]
    M, eps = cfg.max_iterations, cfg.act_epsilon
    dtype = x0.dtype

    alive = np.arange(B)
    x0_a = x0
    s = Tensor(np.zeros(x0.shape, dtype=dtype))
    acc = Tensor(np.zeros(x0.shape, dtype=dtype))
    cum = Tensor(np.zeros(B, dtype=dtype))

    scores: list[list[float]] = [[] for _ in range(B)]
    done_idx: list[np.ndarray] = []
    done_y: list[Tensor] = []
    done_r: list[Tensor] = []

    for i in range(M):
        f = processing(ops.concat_channels([x0_a, s]), params, i, train)
        h = act_score(x0_a, s, f, params.act, cfg.act_activation)
        if not (np.isfinite(f.data).all() and np.isfinite(h.data).all()):
            raise NumericOverflowError(f"non-finite activation in iteration {i + 1}", iteration=i + 1)
        for k, sample in enumerate(alive):
            scores[sample].append(float(h.data[k]))

        s = s + f
        stop = (cum.data + h.data >= 1.0 - eps) if i < M - 1 else np.ones(len(alive), dtype=bool)
        stop_f = stop.astype(dtype)
        remainder = 1.0 - cum
        w = h * (1.0 - stop_f) + remainder * stop_f
        acc = acc + s * w.reshape(-1, 1, 1, 1)

        if stop.any():
            k = np.flatnonzero(stop)
            done_idx.append(alive[k])
            done_y.append(ops.take(x0_a + acc, k) if not stop.all() else x0_a + acc)
            done_r.append(ops.take(remainder, k) if not stop.all() else remainder)
        if stop.all():
            break
        k = np.flatnonzero(~stop)
        alive = alive[k]
        x0_a, s, acc = ops.take(x0_a, k), ops.take(s, k), ops.take(acc, k)
        cum = ops.take(cum + h, k)

    order = np.concatenate(done_idx)
    inverse = np.empty(B, dtype=np.intp)
    inverse[order] = np.arange(B)
    if len(done_y) == 1:
        y, rem = done_y[0], done_r[0]
    else:
        y = ops.take(ops.concat(done_y, axis=0), inverse)
        rem = ops.take(ops.concat(done_r, axis=0), inverse)

    # each sample recorded exactly the scores of the iterations it ran
    samples = [_trace_from_scores(sc) for sc in scores]
    n_iters = np.array([t.n_iters for t in samples], dtype=np.int64)
    return y, BlockTrace(samples, rem, n_iters)
