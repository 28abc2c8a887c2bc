"""Loss assembly, optimizers, the training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .block import BlockTrace
from .cost import CostReport, attach_costs
from .data import Dataset, augment, batches
from .errors import (
    BadMagicError,
    CheckpointShapeError,
    ConfigError,
    ContractError,
    DivergenceError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .network import NetConfig, ParamStore, init_params, net_forward
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 2e-3
    lr_schedule: str = "constant"
    lr_decay_every: int = 1000
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 32
    max_steps: int = 500
    act_tau: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", key="optimizer")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}", key="lr_schedule")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if self.act_tau < 0:
            raise ConfigError("act_tau must be >= 0", key="act_tau")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", key="max_steps")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "step":
            return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_every)
        return self.learning_rate


# -- optimizers ---------------------------------------------------------------


class SGD:
    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v for k, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            self.velocity[k] = state[f"velocity.{k}"].copy()


class Adam:
    kind = "adam"

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = state[f"m.{k}"].copy()
            self.v[k] = state[f"v.{k}"].copy()
        self.t = int(state["t"][0])


def make_optimizer(store: ParamStore, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(store.tensors, cfg.momentum, cfg.weight_decay)
    return Adam(store.tensors, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)


# -- loss and steps -------------------------------------------------------------


def ponder_cost(traces: list[BlockTrace]) -> Tensor:
    """Per-sample sum over blocks of N + R; gradient flows through R only."""
    total = None
    for tr in traces:
        term = tr.remainder + tr.n_iters.astype(tr.remainder.dtype)
        total = term if total is None else total + term
    return total


def total_loss(logits: Tensor, labels, traces: list[BlockTrace], tau: float) -> Tensor:
    """Cross-entropy plus ``tau`` times the batch-mean ponder cost."""
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}", key="act_tau")
    ce = ops.softmax_cross_entropy(logits, labels)
    if tau == 0:
        return ce
    return ce + ponder_cost(traces).mean() * tau


@dataclass
class StepResult:
    loss: float
    accuracy: float
    ponder: list[float]  # mean N + R per block


def train_step(store: ParamStore, images, labels, optimizer, cfg: TrainConfig, step: int = 0,
               net_cfg: NetConfig | None = None) -> StepResult:
    """Forward, loss, backward, parameter update; gradients are cleared afterwards."""
    net_cfg = net_cfg or store.cfg
    logits, traces = net_forward(images, store, net_cfg, train=True)
    loss = total_loss(logits, labels, traces, cfg.act_tau)
    value = loss.item()
    if not np.isfinite(value):
        store.zero_grad()
        raise DivergenceError(f"loss became {value} at step {step}", step=step)
    backward(loss)
    optimizer.step(cfg.lr_at(step))
    store.zero_grad()
    acc = float((logits.data.argmax(axis=1) == np.asarray(labels)).mean())
    return StepResult(value, acc, [float(tr.ponder.mean()) for tr in traces])


METRIC_FIELDS = ("step", "loss", "accuracy")


class MetricsWriter:
    """Line-delimited metrics: a plain-text log and a CSV with the same rows."""

    def __init__(self, out_dir, num_blocks: int):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.columns = [*METRIC_FIELDS, *[f"ponder_block{b + 1}" for b in range(num_blocks)]]
        self._csv_fh = open(out_dir / "metrics.csv", "w", newline="")
        self._log_fh = open(out_dir / "train.log", "w")
        self._csv = csv.writer(self._csv_fh)
        self._csv.writerow(self.columns)

    def write(self, step: int, result: StepResult) -> None:
        row = [step, f"{result.loss:.8g}", f"{result.accuracy:.6g}", *[f"{p:.6g}" for p in result.ponder]]
        self._csv.writerow(row)
        self._log_fh.write(" ".join(f"{k}={v}" for k, v in zip(self.columns, row)) + "\n")

    def close(self) -> None:
        self._csv_fh.close()
        self._log_fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrainResult:
    store: ParamStore
    optimizer: object
    history: list[StepResult] = field(default_factory=list)
    steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [h.loss for h in self.history]


def train(net_cfg: NetConfig, cfg: TrainConfig, dataset: Dataset, out_dir=None, store: ParamStore | None = None
          ) -> TrainResult:
    """Run ``cfg.max_steps`` optimizer steps over shuffled epochs of ``dataset``."""
    store = store or init_params(net_cfg, cfg.seed)
    optimizer = make_optimizer(store, cfg)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(store, optimizer)
    writer = MetricsWriter(out_dir, len(net_cfg.blocks)) if out_dir is not None else None
    batch_size = min(cfg.batch_size, len(dataset))
    step, epoch = 0, 0
    try:
        while step < cfg.max_steps:
            for images, labels, _ in batches(dataset, batch_size, cfg.seed, epoch):
                if step >= cfg.max_steps:
                    break
                if len(labels) < 2:
                    continue  # a lone sample cannot provide batch statistics
                if cfg.augment:
                    images = augment(images, aug_rng)
                res = train_step(store, images, labels, optimizer, cfg, step, net_cfg)
                step += 1
                result.history.append(res)
                if writer:
                    writer.write(step, res)
                if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(Path(out_dir) / f"step{step:06d}.iamn", store, optimizer, step)
            epoch += 1
    finally:
        if writer:
            writer.close()
    result.steps = step
    return result


@dataclass
class EvalResult:
    top1: float
    topk: float
    k: int
    predictions: np.ndarray
    cost: CostReport

    def summary(self) -> dict:
        return {"top1": self.top1, f"top{self.k}": self.topk, **self.cost.summary()}


def evaluate(store: ParamStore, dataset: Dataset, net_cfg: NetConfig | None = None, batch_size: int = 128,
             k: int = 5, flops_per_mac: int = 1) -> EvalResult:
    """Accuracy and per-sample cost with running BN statistics and true early exit."""
    net_cfg = net_cfg or store.cfg
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    k = min(k, net_cfg.num_classes)
    preds, hits1, hitsk, iters = [], [], [], []
    with no_grad():
        for images, labels, _ in batches(dataset, min(batch_size, len(dataset))):
            logits, traces = net_forward(images, store, net_cfg, train=False)
            top = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
            preds.append(top[:, 0])
            hits1.append(top[:, 0] == labels)
            hitsk.append((top == labels[:, None]).any(axis=1))
            iters.append(np.stack([t.n_iters for t in traces], axis=1))
    n_iters = np.concatenate(iters)
    cost = attach_costs(list(n_iters.T), net_cfg, ids=dataset.ids, flops_per_mac=flops_per_mac)
    return EvalResult(
        float(np.concatenate(hits1).mean()),
        float(np.concatenate(hitsk).mean()),
        k,
        np.concatenate(preds),
        cost,
    )


# -- checkpoints ----------------------------------------------------------------
#
# layout (little-endian):
#   b"IAMN" | u32 version | u32 header_len | header JSON (utf-8)
#   u32 record_count | records
#   record: u16 name_len | name | u8 dtype code | u8 ndim | u32 dims[ndim] | raw values
# the header echoes the network config and carries step, optimizer kind and RNG state.

MAGIC = b"IAMN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def net_config_to_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)


def net_config_from_dict(d: dict) -> NetConfig:
    from .block import BlockConfig
    from .network import StemConfig

    return NetConfig(
        blocks=[BlockConfig(**b) for b in d["blocks"]],
        num_classes=d["num_classes"],
        input_shape=tuple(d["input_shape"]),
        stem=StemConfig(**d["stem"]),
    )


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"cannot serialize dtype {arr.dtype} for {name}")
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def save_checkpoint(path, store: ParamStore, optimizer=None, step: int = 0, rng_state: dict | None = None) -> None:
    header = {
        "net_config": net_config_to_dict(store.cfg),
        "step": step,
        "optimizer": getattr(optimizer, "kind", None),
        "rng_state": rng_state,
    }
    records = [(f"param.{k}", t.data) for k, t in store.tensors.items()]
    records += [(f"buffer.{k}", v) for k, v in store.buffers().items()]
    if optimizer is not None:
        records += [(f"opt.{k}", v) for k, v in optimizer.state().items()]
    hjson = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(hjson)) + hjson)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        buf.write(_encode_record(name, arr))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class Checkpoint:
    net_config: NetConfig
    step: int
    optimizer: str | None
    rng_state: dict | None
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file completely; nothing is modified on failure."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an IamNN checkpoint (bad magic {data[:4]!r})")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedCheckpointError(f"{path}: unreadable header") from exc
    (count,) = r.unpack("<I")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "opt": {}}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise TruncatedCheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        kind, _, key = name.partition(".")
        groups.setdefault(kind, {})[key] = arr
    if r.pos != len(data):
        raise TruncatedCheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(
        net_config_from_dict(header["net_config"]),
        header.get("step", 0),
        header.get("optimizer"),
        header.get("rng_state"),
        groups["param"],
        groups["buffer"],
        groups["opt"],
    )


def load_checkpoint(path, store: ParamStore | None = None, optimizer=None) -> tuple[ParamStore, Checkpoint]:
    """Load into ``store`` (or a fresh store built from the echoed config).

    Every name and shape is validated before any tensor is written.
    """
    ck = read_checkpoint(path)
    if store is None:
        store = init_params(ck.net_config, 0, dtype=next(iter(ck.params.values())).dtype)
    expected = {k: t.shape for k, t in store.tensors.items()}
    expected_buf = {k: v.shape for k, v in store.buffers().items()}
    for want, got, what in ((expected, ck.params, "parameter"), (expected_buf, ck.buffers, "buffer")):
        if set(want) != set(got):
            missing = sorted(set(want) ^ set(got))[:5]
            raise CheckpointShapeError(f"{what} names disagree with the network config: {missing}")
        for k, shape in want.items():
            if tuple(got[k].shape) != tuple(shape):
                raise CheckpointShapeError(f"{what} {k}: checkpoint shape {got[k].shape}, network expects {shape}")
    for k, t in store.tensors.items():
        t.data = ck.params[k].astype(t.dtype, copy=True)
    buffers = store.buffers()
    for k, arr in buffers.items():
        arr[...] = ck.buffers[k]
    if optimizer is not None and ck.optimizer_state:
        optimizer.load_state(ck.optimizer_state)
    return store, ck
