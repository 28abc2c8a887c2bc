"""Iterative weight-shared residual networks with adaptive computation time, on numpy."""

from .block import BlockConfig, block_forward, halting_rule
from .config import RunConfig, load_config
from .cost import attach_costs, count_flops, count_flops_resnet
from .data import SyntheticSpec, gen_synthetic, load_cifar_binary
from .network import NetConfig, StemConfig, count_params, count_params_resnet, init_params, net_forward
from .tensor import Tensor, backward, no_grad, precision
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BlockConfig",
    "NetConfig",
    "RunConfig",
    "StemConfig",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "attach_costs",
    "backward",
    "block_forward",
    "count_flops",
    "count_flops_resnet",
    "count_params",
    "count_params_resnet",
    "evaluate",
    "gen_synthetic",
    "halting_rule",
    "init_params",
    "load_checkpoint",
    "load_cifar_binary",
    "load_config",
    "net_forward",
    "no_grad",
    "precision",
    "save_checkpoint",
    "train",
]
