"""Four-block IamNN classifier and analytic parameter counters."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .block import BlockConfig, BlockParams, BlockTrace, block_forward, init_block_params
from .errors import ConfigError, ShapeError
from .ops import BNState
from .tensor import Tensor, default_dtype


@dataclass
class StemConfig:
    kernel: int = 3
    stride: int = 1
    out_channels: int = 16
    use_maxpool: bool = False

    @property
    def padding(self) -> int:
        return self.kernel // 2


# stem maxpool follows the standard ResNet stem: 3x3 window, stride 2, padding 1
STEM_POOL = (3, 2, 1)


@dataclass
class NetConfig:
    blocks: list[BlockConfig]
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    stem: StemConfig = field(default_factory=StemConfig)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not self.blocks:
            raise ConfigError("a network needs at least one block", key="blocks")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", key="num_classes")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"bad input_shape {self.input_shape}", key="input_shape")
        self.block_sizes()

    def block_sizes(self) -> list[tuple[int, int]]:
        """Spatial size seen by each block; raises ConfigError on underflow."""
        _, h, w = self.input_shape
        k, s, p = self.stem.kernel, self.stem.stride, self.stem.padding
        h, w = ops.conv_output_size(h, k, s, p), ops.conv_output_size(w, k, s, p)
        if self.stem.use_maxpool:
            h, w = (ops.conv_output_size(v, *STEM_POOL) for v in (h, w))
        sizes = []
        for i in range(len(self.blocks)):
            if i:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(f"spatial size underflows before block {i + 1}", key="input_shape")
            sizes.append((h, w))
        return sizes

    def with_iterations(self, max_iterations) -> "NetConfig":
        blocks = [replace(b, max_iterations=int(m)) for b, m in zip(self.blocks, max_iterations, strict=True)]
        return replace(self, blocks=blocks)

    @property
    def max_iterations(self) -> list[int]:
        return [b.max_iterations for b in self.blocks]


def desk_config(**block_kw) -> NetConfig:
    """Small CPU-trainable network: 3x3 stem, widths 16/32/32/64, two iterations per block."""
    blocks = [BlockConfig(c, 2, **block_kw) for c in (16, 32, 32, 64)]
    return NetConfig(blocks, num_classes=10, input_shape=(3, 32, 32), stem=StemConfig(3, 1, 16, False))


def imagenet_config() -> NetConfig:
    """ImageNet-scale network with the iteration caps of a 152-layer ResNet.

    Block widths equal the ResNet bottleneck widths and the processing block
    keeps that width throughout (no further channel reduction).
    """
    widths = (64, 128, 256, 512)
    blocks = [BlockConfig(c, m, bottleneck_channels=c) for c, m in zip(widths, (3, 8, 36, 3))]
    return NetConfig(blocks, num_classes=1000, input_shape=(3, 224, 224), stem=StemConfig(7, 2, 64, True))


def cifar_config(num_classes: int = 10) -> NetConfig:
    """CIFAR-scale network with the iteration caps of a 101-layer ResNet."""
    widths = (64, 128, 256, 512)
    blocks = [BlockConfig(c, m, bottleneck_channels=c) for c, m in zip(widths, (3, 4, 23, 3))]
    return NetConfig(blocks, num_classes=num_classes, input_shape=(3, 32, 32), stem=StemConfig(3, 1, 64, False))


class ParamStore:
    """Named registry of every trainable tensor and batchnorm buffer."""

    def __init__(self, cfg: NetConfig, stem_conv: Tensor, stem_bn: BNState, blocks: list[BlockParams],
                 head_w: Tensor, head_b: Tensor):
        self.cfg = cfg
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.tensors: dict[str, Tensor] = {}
        for name, t in self._named():
            if name in self.tensors or any(t is other for other in self.tensors.values()):
                raise ValueError(f"parameter {name} registered twice")
            t.name = name
            self.tensors[name] = t
        self.bns: dict[str, BNState] = dict(self._named_bn())

    def _named(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn.gamma", self.stem_bn.gamma
        yield "stem.bn.beta", self.stem_bn.beta
        for i, bp in enumerate(self.blocks, start=1):
            yield from bp.named_tensors(f"block{i}")
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def _named_bn(self):
        yield "stem.bn", self.stem_bn
        for i, bp in enumerate(self.blocks, start=1):
            yield from bp.named_bn(f"block{i}")

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self.bns.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)


def init_params(cfg: NetConfig, seed: int = 0, dtype=None) -> ParamStore:
    dtype = np.dtype(dtype or default_dtype())
    ss = np.random.SeedSequence(seed)
    stem_rng, head_rng, *block_seeds = ss.spawn(2 + len(cfg.blocks))
    stem_rng, head_rng = np.random.default_rng(stem_rng), np.random.default_rng(head_rng)

    c_in, _, _ = cfg.input_shape
    k, c_stem = cfg.stem.kernel, cfg.stem.out_channels
    stem_conv = Tensor(
        stem_rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), size=(c_stem, c_in, k, k)).astype(dtype),
        requires_grad=True,
    )
    blocks = []
    c_prev = c_stem
    for bc, bseed in zip(cfg.blocks, block_seeds):
        blocks.append(init_block_params(bc, c_prev, np.random.default_rng(bseed), dtype))
        c_prev = bc.channels
    bound = 1.0 / np.sqrt(c_prev)
    head_w = Tensor(head_rng.uniform(-bound, bound, (cfg.num_classes, c_prev)).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)
    return ParamStore(cfg, stem_conv, BNState.create(c_stem, dtype), blocks, head_w, head_b)


def stem_forward(x: Tensor, params: ParamStore, cfg: NetConfig, train: bool) -> Tensor:
    st = cfg.stem
    h = ops.relu(ops.batchnorm(ops.conv2d(x, params.stem_conv, st.stride, st.padding), params.stem_bn, train))
    if st.use_maxpool:
        h = ops.maxpool2d(h, *STEM_POOL)
    return h


def net_forward(batch, params: ParamStore, cfg: NetConfig | None = None, train: bool = False):
    """Classify ``batch`` [B,C,H,W]; returns ``(logits, [BlockTrace per block])``."""
    cfg = cfg or params.cfg
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params.stem_conv.dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise ShapeError(f"network expects [B,{','.join(map(str, cfg.input_shape))}], got {x.shape}")
    h = stem_forward(x, params, cfg, train)
    traces: list[BlockTrace] = []
    for i, (bp, bc) in enumerate(zip(params.blocks, cfg.blocks)):
        if i:
            h = ops.maxpool2x2(h)
        h, trace = block_forward(h, bp, bc, train)
        traces.append(trace)
    logits = ops.linear(ops.global_avg_pool(h), params.head_w, params.head_b)
    return logits, traces


@dataclass(frozen=True)
class ParamCount:
    stem: int
    entry: int
    shared_conv: int
    per_iter_bn: int
    act_heads: int
    head: int

    @property
    def total(self) -> int:
        return self.stem + self.entry + self.shared_conv + self.per_iter_bn + self.act_heads + self.head

    def as_dict(self) -> dict[str, int]:
        return {
            "stem": self.stem,
            "entry": self.entry,
            "shared_conv": self.shared_conv,
            "per_iter_bn": self.per_iter_bn,
            "act_heads": self.act_heads,
            "head": self.head,
            "total": self.total,
        }


def conv_params(c_in: int, c_out: int, kernel: int) -> int:
    return c_out * c_in * kernel * kernel


def block_iteration_bn_params(bc: BlockConfig) -> int:
    """Trainable batchnorm scalars added by one more iteration of a block."""
    return 2 * (bc.bottleneck_channels + bc.bottleneck_channels + bc.channels)


def count_params(cfg: NetConfig) -> ParamCount:
    """Closed-form trainable-parameter count; allocates nothing."""
    c_in = cfg.input_shape[0]
    st = cfg.stem
    stem = conv_params(c_in, st.out_channels, st.kernel) + 2 * st.out_channels
    entry = shared = per_iter = act = 0
    c_prev = st.out_channels
    for bc in cfg.blocks:
        C, b, hid = bc.channels, bc.bottleneck_channels, bc.act_hidden
        entry += conv_params(c_prev, C, 1) + 2 * C
        shared += conv_params(2 * C, b, 1) + conv_params(b, b, 3) + conv_params(b, C, 1)
        per_iter += bc.max_iterations * block_iteration_bn_params(bc)
        act += (3 * C * hid + hid) + (hid * hid + hid) + (hid + 1)
        c_prev = C
    head = c_prev * cfg.num_classes + cfg.num_classes
    return ParamCount(stem, entry, shared, per_iter, act, head)


@dataclass(frozen=True)
class ResNetSpec:
    """Reference ResNet layout: units per stage and the Table-style class count."""

    units: tuple[int, int, int, int]
    bottleneck: bool
    num_classes: int


RESNETS = {
    "resnet18": ResNetSpec((2, 2, 2, 2), False, 1000),
    "resnet101": ResNetSpec((3, 4, 23, 3), True, 10),
    "resnet152": ResNetSpec((3, 8, 36, 3), True, 1000),
}
RESNET_WIDTHS = (64, 128, 256, 512)


def resnet_units(reference: str, input_size: int = 224):
    """Yield ``(c_in, width, c_out, stride, spatial_in)`` for every residual unit.

    Inputs below 64 pixels use the CIFAR stem (3x3 conv, stride 1, no pool);
    larger inputs use the 7x7/2 conv plus 3x3/2 maxpool stem.
    """
    spec = _resnet(reference)
    size = _resnet_stem_out(input_size)
    c_in = 64
    for stage, (n, width) in enumerate(zip(spec.units, RESNET_WIDTHS)):
        c_out = width * 4 if spec.bottleneck else width
        for u in range(n):
            stride = 2 if (u == 0 and stage > 0) else 1
            yield c_in, width, c_out, stride, size
            size = ops.conv_output_size(size, 3, stride, 1)
            c_in = c_out


def _resnet(reference: str) -> ResNetSpec:
    try:
        return RESNETS[reference]
    except KeyError:
        raise ConfigError(f"unknown reference {reference!r}; choose from {sorted(RESNETS)}", key="reference") from None


def _resnet_stem_out(input_size: int) -> int:
    if input_size < 64:
        return input_size
    size = ops.conv_output_size(input_size, 7, 2, 3)
    return ops.conv_output_size(size, *STEM_POOL)


def resnet_stem_kernel(input_size: int) -> int:
    return 3 if input_size < 64 else 7


def count_params_resnet(reference: str, num_classes: int | None = None, input_size: int = 224) -> int:
    """Trainable parameters of a standard (non-shared) reference ResNet."""
    spec = _resnet(reference)
    num_classes = spec.num_classes if num_classes is None else num_classes
    k = resnet_stem_kernel(input_size)
    total = conv_params(3, 64, k) + 2 * 64
    c_last = 64
    for c_in, width, c_out, stride, _ in resnet_units(reference, input_size):
        if spec.bottleneck:
            total += conv_params(c_in, width, 1) + conv_params(width, width, 3) + conv_params(width, c_out, 1)
            total += 2 * (width + width + c_out)
        else:
            total += conv_params(c_in, width, 3) + conv_params(width, width, 3) + 2 * (width + width)
        if stride != 1 or c_in != c_out:
            total += conv_params(c_in, c_out, 1) + 2 * c_out
        c_last = c_out
    return total + c_last * num_classes + num_classes
