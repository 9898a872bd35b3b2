"""
Neural network layers built on the tensor core.

Inputs to convolutional layers are shaped ``[batch, channels, width]``.
"""

import contextlib
import enum
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shrinknet.options import ShrinkageMode
from shrinknet.tensor import (
    Tensor,
    apply_op,
    broadcast_shape,
    matmul,
    reduce_mean,
    reshape,
    transpose,
    unbroadcast,
)
from shrinknet.util import ContractError, DimensionError, DynamicScopeVar

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    """
    Base class for layers and networks.

    Subclasses list their trainable tensors in ``_parameters`` and their
    non-trainable numpy state in ``_buffers``; child modules (or lists of
    them) are discovered from instance attributes in assignment order.
    """

    _parameters: Tuple[str, ...] = ()
    _buffers: Tuple[str, ...] = ()
    training: bool = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name in self._parameters:
            yield prefix + name, getattr(self, name)
        for child_name, child in self.children():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, "Module", str]]:
        for name in self._buffers:
            yield prefix + name, self, name
        for child_name, child in self.children():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_normal(
    rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype=np.float64
) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv1d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """
    Cross-correlate ``x`` with ``weight`` (no kernel flip) and add ``bias``.

    >>> conv1d(Tensor([[[1, 2, 3]]]), Tensor([[[1]]]), Tensor([0])).values.tolist()
    [[[1.0, 2.0, 3.0]]]
    """
    if x.ndim != 3:
        raise DimensionError(f"conv1d expects [batch, channels, width], got {list(x.shape)}")
    batch, channels, width = x.shape
    out_channels, in_channels, kernel = weight.shape
    if channels != in_channels:
        raise DimensionError(
            f"conv1d input has {channels} channels but the kernel expects {in_channels}"
        )
    padded_width = width + 2 * padding
    if padded_width < kernel:
        raise DimensionError(
            f"width {width} (padding {padding}) is too small for kernel width {kernel}"
        )
    out_width = (padded_width - kernel) // stride + 1
    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding)))
    # [batch, channels, out_width, kernel]
    windows = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    w = weight.values
    out = np.tensordot(windows, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    out = out + bias.values[None, :, None]

    def backward_fn(g: np.ndarray):
        grad_bias = g.sum(axis=(0, 2))
        grad_weight = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
        # [batch, out_width, channels, kernel]
        grad_windows = np.tensordot(g, w, axes=([1], [0]))
        grad_xp = np.zeros((batch, channels, padded_width), dtype=g.dtype)
        span = stride * (out_width - 1) + 1
        for k in range(kernel):
            grad_xp[:, :, k : k + span : stride] += grad_windows[:, :, :, k].transpose(0, 2, 1)
        return grad_xp[:, :, padding : padding + width], grad_weight, grad_bias

    return apply_op("conv1d", out, (x, weight, bias), backward_fn)


class Conv1d(Module):
    _parameters = ("weight", "bias")

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_width: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        if kernel_width < 1 or stride < 1 or padding < 0:
            raise ContractError(
                f"invalid convolution geometry: kernel {kernel_width}, "
                f"stride {stride}, padding {padding}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_channels, in_channels, kernel_width)
        self.weight = Tensor(
            he_normal(rng, shape, in_channels * kernel_width, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def out_width(self, in_width: int) -> int:
        kernel = self.weight.shape[2]
        return (in_width + 2 * self.padding - kernel) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


def _stat_axes(x: Tensor) -> Tuple[int, ...]:
    if x.ndim == 3:
        return (0, 2)
    if x.ndim == 2:
        return (0,)
    raise DimensionError(f"batch norm expects rank 2 or 3 input, got {list(x.shape)}")


class BatchNorm1d(Module):
    """
    Per-channel batch normalization.

    In train mode each channel is normalized by the statistics of the current
    batch, and the running statistics move toward them by ``momentum`` (the
    running variance uses the unbiased batch variance). Eval mode uses the
    running statistics only.
    """

    _parameters = ("gamma", "beta")
    _buffers = ("running_mean", "running_var")

    def __init__(
        self,
        channels: int,
        eps: float = BN_EPS,
        momentum: float = BN_MOMENTUM,
        dtype=np.float64,
    ):
        if not 0.0 < momentum < 1.0:
            raise ContractError(f"batch norm momentum must lie in (0, 1), got {momentum}")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        axes = _stat_axes(x)
        channels = self.gamma.shape[0]
        if x.shape[1] != channels:
            raise DimensionError(
                f"batch norm over {channels} channels got input {list(x.shape)}"
            )
        # reshape per-channel vectors to broadcast along axis 1
        view = (1, channels) + (1,) * (x.ndim - 2)
        gamma = self.gamma.values.reshape(view)
        beta = self.beta.values.reshape(view)
        xv = x.values
        if self.training:
            if x.shape[0] < 2:
                raise ContractError("batch norm in train mode needs a batch of at least 2")
            count = xv.size // channels
            mean = xv.mean(axis=axes, keepdims=True)
            var = xv.var(axis=axes, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (xv - mean) * inv_std
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.reshape(-1) * (
                count / (count - 1)
            )

            def backward_fn(g: np.ndarray):
                dxhat = g * gamma
                dx = (
                    inv_std
                    / count
                    * (
                        count * dxhat
                        - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
                return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        else:
            inv_std = 1.0 / np.sqrt(self.running_var.reshape(view) + self.eps)
            xhat = (xv - self.running_mean.reshape(view)) * inv_std

            def backward_fn(g: np.ndarray):
                return g * gamma * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return apply_op(
            "batch_norm", xhat * gamma + beta, (x, self.gamma, self.beta), backward_fn
        )


class Dense(Module):
    _parameters = ("weight", "bias")

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(
            he_normal(rng, (out_features, in_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        in_features = self.weight.shape[1]
        if x.ndim != 2 or x.shape[1] != in_features:
            raise DimensionError(
                f"dense layer expects [batch, {in_features}], got {list(x.shape)}"
            )
        return matmul(x, transpose(self.weight)) + self.bias


class PoolOver(enum.Enum):
    width = "width"
    width_and_channels = "width_and_channels"


def gap(x: Tensor, over: PoolOver = PoolOver.width) -> Tensor:
    """Global average pooling to ``[batch, channels]`` or ``[batch, 1]``."""
    if x.ndim != 3:
        raise DimensionError(f"gap expects [batch, channels, width], got {list(x.shape)}")
    if over is PoolOver.width:
        return reduce_mean(x, [2])
    return reshape(reduce_mean(x, [1, 2]), (x.shape[0], 1))


@dataclass
class ThresholdResult:
    """
    Thresholds of one shrinkage step.

    ``tau``, ``alpha`` and ``mean_abs`` share a shape: ``[batch, 1]`` when the
    threshold is channel-shared, ``[batch, channels]`` when channel-wise.

    inv: tau == alpha * mean_abs
    """

    tau: Tensor
    alpha: Tensor
    mean_abs: Tensor


def _tau_for(x: Tensor, tau: Tensor) -> Tensor:
    if x.ndim == 3 and tau.ndim == 2 and tau.shape[0] == x.shape[0]:
        if tau.shape[1] not in (1, x.shape[1]):
            raise DimensionError(
                f"threshold shape {list(tau.shape)} does not fit input {list(x.shape)}"
            )
        return reshape(tau, tau.shape + (1,))
    broadcast_shape(x.shape, tau.shape)
    return tau


def soft_threshold(x: Tensor, tau: Union[ThresholdResult, Tensor, float]) -> Tensor:
    """
    Shrink every value toward zero by ``tau``; values within ``[-tau, tau]`` become 0.

    At ``|x| == tau`` the gradient is that of the zero branch.

    >>> soft_threshold(Tensor([2.0, 0.3, -2.0]), 0.5).values.tolist()
    [1.5, 0.0, -1.5]
    """
    if isinstance(tau, ThresholdResult):
        tau = tau.tau
    if not isinstance(tau, Tensor):
        tau = Tensor(np.array(tau, dtype=x.dtype))
    if np.any(tau.values < 0):
        raise ContractError("soft threshold needs a non-negative threshold")
    tau = _tau_for(x, tau)
    xv, tv = x.values, tau.values
    tau_shape = tau.shape
    upper = xv > tv
    lower = xv < -tv
    out = np.where(upper, xv - tv, np.where(lower, xv + tv, 0.0)).astype(xv.dtype)
    gate = upper | lower
    branch = upper.astype(np.int8) - lower.astype(np.int8)

    def backward_fn(g: np.ndarray):
        return g * gate, unbroadcast(-(g * branch), tau_shape)

    return apply_op("soft_threshold", out, (x, tau), backward_fn, branches=branch)


class _ThresholdOverride:
    def __init__(self, value: float):
        self.value = value


_THRESHOLD_OVERRIDE: DynamicScopeVar[_ThresholdOverride] = DynamicScopeVar(
    _ThresholdOverride, "threshold override"
)


@contextlib.contextmanager
def threshold_override(value: float = 0.0) -> Iterator[None]:
    """
    Force every threshold computed in this scope to ``value``.

    With ``value=0`` a shrinkage network behaves like the same network
    without shrinkage.
    """
    if value < 0:
        raise ContractError("threshold override must be non-negative")
    with _THRESHOLD_OVERRIDE.open(_ThresholdOverride(value)):
        yield


class ThresholdSubnet(Module):
    """
    Computes ``tau = alpha * A`` from a feature map.

    ``A`` is the mean absolute value of the map (per channel for the
    channel-wise mode, over all channels for the channel-shared mode) and
    ``alpha`` comes from two dense layers over the width-pooled absolute
    values, ending in a sigmoid.
    """

    def __init__(
        self,
        channels: int,
        mode: ShrinkageMode,
        hidden: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        hidden = channels if hidden is None else hidden
        self.mode = mode
        self.fc1 = Dense(channels, hidden, rng, dtype)
        self.fc2 = Dense(hidden, 1 if mode is ShrinkageMode.cs else channels, rng, dtype)

    def forward(self, x: Tensor) -> ThresholdResult:
        return compute_threshold(x, self)


def _open_unit(alpha: Tensor) -> Tensor:
    """Pull sigmoid outputs that rounded to exactly 0 or 1 back inside (0, 1)."""
    info = np.finfo(alpha.dtype)
    values = np.clip(alpha.values, info.tiny, 1.0 - info.epsneg).astype(alpha.dtype)
    return apply_op("clamp", values, (alpha,), lambda g: (g,))


def compute_threshold(x: Tensor, subnet: ThresholdSubnet) -> ThresholdResult:
    pooled = gap(x.abs(), PoolOver.width)
    if subnet.mode is ShrinkageMode.cs:
        mean_abs = reshape(reduce_mean(pooled, [1]), (x.shape[0], 1))
    else:
        mean_abs = pooled
    alpha = _open_unit(subnet.fc2.forward(subnet.fc1.forward(pooled).relu()).sigmoid())
    override = _THRESHOLD_OVERRIDE.get_if_in_scope()
    if override is not None:
        tau = Tensor(np.full(mean_abs.shape, override.value, dtype=x.dtype))
    else:
        tau = alpha * mean_abs
    return ThresholdResult(tau=tau, alpha=alpha, mean_abs=mean_abs)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    >>> round(softmax_cross_entropy(Tensor(np.zeros((1, 8))), [3]).item(), 4)
    2.0794
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {list(logits.shape)}")
    batch, num_classes = logits.shape
    label_arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if label_arr.shape[0] != batch:
        raise DimensionError(f"{label_arr.shape[0]} labels for {batch} rows of logits")
    if np.any(label_arr < 0) or np.any(label_arr >= num_classes):
        raise ContractError(f"labels must lie in 0..{num_classes - 1}")
    z = logits.values
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    rows = np.arange(batch)
    loss = -log_probs[rows, label_arr].mean()
    probs = exp / total

    def backward_fn(g: np.ndarray):
        grad = probs.copy()
        grad[rows, label_arr] -= 1.0
        return (grad * (g / batch),)

    return apply_op(
        "softmax_cross_entropy", np.array(loss, dtype=z.dtype), (logits,), backward_fn
    )
