"""INI-style run configuration shared by every command.

Schema (all keys optional; anything else is rejected by name)::

    [net]
    preset = desk                 ; desk | cifar | imagenet, the base that other keys override
    num_classes = 5
    input_channels = 3
    input_size = 16

    [stem]
    kernel = 3
    stride = 1
    channels = 16
    maxpool = false

    [blocks]
    channels = 16, 32, 32, 64
    max_iterations = 2, 2, 2, 2
    bottleneck_channels = 4, 8, 8, 16

    [act]
    hidden = 64
    epsilon = 0.01
    activation = relu
    bias_init = 0.0

    [train]                       ; any TrainConfig field
    optimizer = adam
    act_tau = 0.01

    [data]
    source = synthetic            ; synthetic | cifar10 | cifar100
    samples_per_class = 100
    noise_level = 0.0
    noise_pattern = uniform       ; uniform | alternate (every other sample noisy)
    seed = 0
    val_seed = 1000
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .block import BlockConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .network import NetConfig, StemConfig, cifar_config, desk_config, imagenet_config
from .training import TrainConfig

PRESETS = {"desk": desk_config, "cifar": cifar_config, "imagenet": imagenet_config}
SECTIONS = {
    "net": {"preset", "num_classes", "input_channels", "input_size"},
    "stem": {"kernel", "stride", "channels", "maxpool"},
    "blocks": {"channels", "max_iterations", "bottleneck_channels"},
    "act": {"hidden", "epsilon", "activation", "bias_init"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "data": {"source", "samples_per_class", "noise_level", "noise_pattern", "seed", "val_seed"},
}


@dataclass
class DataConfig:
    source: str = "synthetic"
    samples_per_class: int = 100
    noise_level: float = 0.0
    noise_pattern: str = "uniform"
    seed: int = 0
    val_seed: int = 1000

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"unknown data source {self.source!r}", key="data.source")
        if self.noise_pattern not in ("uniform", "alternate"):
            raise ConfigError(f"unknown noise_pattern {self.noise_pattern!r}", key="data.noise_pattern")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError("noise_level must lie in [0, 1]", key="data.noise_level")

    def synthetic_spec(self, net: NetConfig, seed: int) -> SyntheticSpec:
        c, h, _ = net.input_shape
        n = net.num_classes * self.samples_per_class
        if self.noise_pattern == "alternate":
            noise = [self.noise_level if i % 2 else 0.0 for i in range(n)]
        else:
            noise = self.noise_level
        return SyntheticSpec(net.num_classes, h, self.samples_per_class, noise, seed, c)


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=desk_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _ints(text: str, key: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected a list of integers, got {text!r}", key=key) from None


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r}", key=key) from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]", key=section)
        for key in cp[section]:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}", key=f"{section}.{key}")
    get = lambda s, k: cp.get(s, k, fallback=None)  # noqa: E731

    preset = get("net", "preset") or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", key="net.preset")
    base = PRESETS[preset]()

    c_in, size, _ = base.input_shape
    c_in = _convert(get("net", "input_channels") or str(c_in), 0, "net.input_channels")
    size = _convert(get("net", "input_size") or str(size), 0, "net.input_size")
    num_classes = _convert(get("net", "num_classes") or str(base.num_classes), 0, "net.num_classes")

    stem = base.stem
    stem = StemConfig(
        _convert(get("stem", "kernel") or str(stem.kernel), 0, "stem.kernel"),
        _convert(get("stem", "stride") or str(stem.stride), 0, "stem.stride"),
        _convert(get("stem", "channels") or str(stem.out_channels), 0, "stem.channels"),
        _convert(get("stem", "maxpool") or str(stem.use_maxpool), True, "stem.maxpool"),
    )

    widths = _ints(get("blocks", "channels"), "blocks.channels") if get("blocks", "channels") else [
        b.channels for b in base.blocks]
    n = len(widths)
    if get("blocks", "max_iterations"):
        iters = _ints(get("blocks", "max_iterations"), "blocks.max_iterations")
    else:
        iters = [b.max_iterations for b in base.blocks][:n]
    bneck_text = get("blocks", "bottleneck_channels")
    if bneck_text:
        bneck = _ints(bneck_text, "blocks.bottleneck_channels")
    elif get("blocks", "channels"):
        bneck = [None] * n
    else:
        bneck = [b.bottleneck_channels for b in base.blocks]
    if not len(iters) == len(bneck) == n:
        raise ConfigError("blocks.channels, max_iterations and bottleneck_channels differ in length",
                          key="blocks.max_iterations")
    b0 = base.blocks[0]
    act = dict(
        act_hidden=_convert(get("act", "hidden") or str(b0.act_hidden), 0, "act.hidden"),
        act_epsilon=_convert(get("act", "epsilon") or str(b0.act_epsilon), 0.0, "act.epsilon"),
        act_activation=get("act", "activation") or b0.act_activation,
        act_bias_init=_convert(get("act", "bias_init") or str(b0.act_bias_init), 0.0, "act.bias_init"),
    )
    blocks = [BlockConfig(c, m, b, **act) for c, m, b in zip(widths, iters, bneck)]
    net = NetConfig(blocks, num_classes, (c_in, size, size), stem)

    defaults = TrainConfig()
    train_kw = {k: _convert(v, getattr(defaults, k), f"train.{k}") for k, v in cp["train"].items()} \
        if cp.has_section("train") else {}
    data_defaults = DataConfig()
    data_kw = {k: _convert(v, getattr(data_defaults, k), f"data.{k}") for k, v in cp["data"].items()} \
        if cp.has_section("data") else {}
    return RunConfig(net, TrainConfig(**train_kw), DataConfig(**data_kw))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", key=str(path))
    return parse_config(path.read_text())


def format_config(run: RunConfig) -> str:
    """Inverse of :func:`parse_config` (fully explicit, no preset)."""
    net = run.net
    b0 = net.blocks[0]
    join = lambda xs: ", ".join(str(x) for x in xs)  # noqa: E731
    cp = configparser.ConfigParser()
    cp["net"] = {"num_classes": net.num_classes, "input_channels": net.input_shape[0],
                 "input_size": net.input_shape[1]}
    cp["stem"] = {"kernel": net.stem.kernel, "stride": net.stem.stride, "channels": net.stem.out_channels,
                  "maxpool": str(net.stem.use_maxpool).lower()}
    cp["blocks"] = {"channels": join(b.channels for b in net.blocks),
                    "max_iterations": join(b.max_iterations for b in net.blocks),
                    "bottleneck_channels": join(b.bottleneck_channels for b in net.blocks)}
    cp["act"] = {"hidden": b0.act_hidden, "epsilon": b0.act_epsilon, "activation": b0.act_activation,
                 "bias_init": b0.act_bias_init}
    cp["train"] = {k: str(v).lower() if isinstance(v, bool) else v for k, v in dataclasses.asdict(run.train).items()}
    cp["data"] = dataclasses.asdict(run.data)
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in cp[section].items()]
        lines.append("")
    return "\n".join(lines)
