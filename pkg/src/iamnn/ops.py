"""Neural-network operations on :class:`~iamnn.tensor.Tensor`.

Convolutions are computed as a single tensordot over a strided window view,
so the forward pass touches each multiply-accumulate exactly once; that count
is reported to an active :func:`count_macs` context.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, ShapeError
from .tensor import Tensor, _wrap, default_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_counters = threading.local()


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulates executed by conv2d and linear.

    Yields a dict with ``conv`` and ``linear`` totals (summed over the batch).
    """
    counts = {"conv": 0, "linear": 0}
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    stack.append(counts)
    try:
        yield counts
    finally:
        stack.pop()


def _record_macs(kind: str, n: int) -> None:
    for counts in getattr(_counters, "stack", ()):
        counts[kind] += n


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation of ``x`` [B,Cin,H,W] with ``weight`` [Cout,Cin,K,K]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cw, K, K2 = weight.shape
    if Cw != Cin or K != K2:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if K > H + 2 * padding or K > W + 2 * padding:
        raise ShapeError(f"kernel {K} larger than padded input {x.shape} (padding {padding})")
    Ho = conv_output_size(H, K, stride, padding)
    Wo = conv_output_size(W, K, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = weight.data

    if K == 1:
        cols = xp[:, :, : stride * Ho : stride, : stride * Wo : stride]
        out = np.tensordot(w[:, :, 0, 0], cols, axes=(1, 1)).transpose(1, 0, 2, 3)
    else:
        cols = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    _record_macs("conv", B * Cout * Ho * Wo * Cin * K * K)

    padded_shape = xp.shape

    def bw(g):
        gx = gw = None
        if weight.requires_grad:
            if K == 1:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            if K == 1:
                gc = np.tensordot(w[:, :, 0, 0], g, axes=(0, 1)).transpose(1, 0, 2, 3)
                gxp[:, :, : stride * Ho : stride, : stride * Wo : stride] += gc
            else:
                # (B, Ho, Wo, Cin, K, K)
                gc = np.tensordot(g, w, axes=([1], [0]))
                for i in range(K):
                    for j in range(K):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gc[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return Tensor._from_op(out, (x, weight), bw)


@dataclass
class BNState:
    """Affine parameters and running statistics of one batchnorm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=None) -> "BNState":
        dtype = dtype or default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, bn: BNState, train: bool) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In train mode the batch statistics normalize and the running statistics
    are updated in place; in eval mode the running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects [B,C,H,W], got {x.shape}")
    C = x.shape[1]
    if bn.channels != C:
        raise ShapeError(f"batchnorm has {bn.channels} channels, input {x.shape} has {C}")
    xd = x.data
    gamma = bn.gamma.data.reshape(1, C, 1, 1)
    beta = bn.beta.data.reshape(1, C, 1, 1)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if train:
        if n < 2:
            raise DegenerateBatchError(f"batchnorm needs B*H*W >= 2 in train mode, got {n}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = centered * inv_std
        m = bn.momentum
        bn.running_mean *= 1 - m
        bn.running_mean += m * mu.ravel()
        bn.running_var *= 1 - m
        bn.running_var += m * var.ravel() * (n / (n - 1))
    else:
        inv_std = (1.0 / np.sqrt(bn.running_var + bn.eps)).reshape(1, C, 1, 1).astype(xd.dtype)
        xhat = (xd - bn.running_mean.reshape(1, C, 1, 1)) * inv_std
    out = (gamma * xhat + beta).astype(xd.dtype, copy=False)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if bn.gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if bn.beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            if train:
                gx = (inv_std / n) * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, bn.gamma, bn.beta), bw)


@contextlib.contextmanager
def record_branches():
    """Log every data-dependent branch taken (ReLU masks, max-pool winners).

    Two evaluations with equal logs ran through the same smooth piece of the
    function, which is what a finite-difference stencil needs.
    """
    log: list[np.ndarray] = []
    prev = getattr(_counters, "branches", None)
    _counters.branches = log
    try:
        yield log
    finally:
        _counters.branches = prev


def _branch(taken: np.ndarray) -> None:
    log = getattr(_counters, "branches", None)
    if log is not None:
        log.append(taken)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _branch(np.packbits(mask))
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(tensors) -> Tensor:
    """Concatenate [B,C_k,H,W] tensors along the channel axis."""
    return concat(tensors, axis=1)


def take(x: Tensor, index) -> Tensor:
    """Select rows of ``x`` along the batch axis; indices may repeat."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape
    unique = len(np.unique(index)) == len(index)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if unique:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(x.data[index], (x,), bw)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kernel, stride, padding)
    Wo = conv_output_size(W, kernel, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool {kernel}/{stride} underflows input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    _branch(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    padded_shape = xp.shape

    def bw(g):
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        di, dj = np.divmod(arg, kernel)
        for i in range(kernel):
            for j in range(kernel):
                sel = (di == i) & (dj == j)
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * sel
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    return maxpool2d(x, 2, 2)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] channel means."""
    return x.mean(axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    _record_macs("linear", xd.shape[0] * wd.shape[0] * wd.shape[1])
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(out, parents, bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    B = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
