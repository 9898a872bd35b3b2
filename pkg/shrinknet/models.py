"""
Residual shrinkage networks and the plain residual CNN they are compared with.

Both networks share one topology:

    stem conv -> residual blocks (stride 2 at every stage entry)
              -> batch norm -> relu -> width pooling -> dense logits

A shrinkage block ends its main path with an adaptive soft threshold before
the shortcut addition; the plain CNN omits that step. Weights of the shared
topology and of the threshold subnetworks are drawn from separate random
streams, so a shrinkage network and a CNN built from the same config start
from identical shared weights.
"""

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from shrinknet.layers import (
    BatchNorm1d,
    Conv1d,
    Dense,
    Module,
    PoolOver,
    ThresholdResult,
    ThresholdSubnet,
    compute_threshold,
    gap,
    soft_threshold,
)
from shrinknet.options import Precision, ShrinkageMode
from shrinknet.tensor import Tensor
from shrinknet.util import CheckpointShapeError, ConfigurationError, DimensionError


class ModelKind(enum.Enum):
    drsn = "drsn"
    cnn = "cnn"

    def __repr__(self):
        return f"ModelKind.{self.name}"


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters.

    ``fc_hidden`` is the hidden width of every threshold subnetwork; None
    means "as many as the block has channels".
    """

    input_channels: int = 8
    input_width: int = 1200
    stem_channels: int = 4
    kernel_width: int = 3
    stage_channels: Tuple[int, ...] = (4, 8, 16)
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2)
    fc_hidden: Optional[int] = None
    num_classes: int = 8
    mode: ShrinkageMode = ShrinkageMode.cw
    seed: int = 0
    precision: Precision = field(default=Precision.float64)

    @property
    def padding(self) -> int:
        return self.kernel_width // 2

    def stage_widths(self) -> List[int]:
        """Feature-map width after the stem and after each stage."""
        width = self.input_width + 2 * self.padding - self.kernel_width + 1
        widths = [width]
        for _ in self.stage_channels:
            width = (width + 2 * self.padding - self.kernel_width) // 2 + 1
            widths.append(width)
        return widths

    def validate(self) -> "ModelConfig":
        for name in ("input_channels", "input_width", "stem_channels", "kernel_width", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(name, f"must be a positive integer, got {value!r}")
        if self.fc_hidden is not None and self.fc_hidden < 1:
            raise ConfigurationError("fc_hidden", "must be positive when given")
        if not self.stage_channels:
            raise ConfigurationError("stage_channels", "at least one stage is required")
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigurationError(
                "blocks_per_stage",
                f"has {len(self.blocks_per_stage)} entries but stage_channels has "
                f"{len(self.stage_channels)}",
            )
        if any(c < 1 for c in self.stage_channels):
            raise ConfigurationError("stage_channels", "all extents must be positive")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigurationError("blocks_per_stage", "all extents must be positive")
        if min(self.stage_widths()) < 1:
            raise ConfigurationError(
                "input_width", f"{self.input_width} is too narrow for {len(self.stage_channels)} stages"
            )
        return self


class ResidualShrinkageBlock(Module):
    """
    Pre-activation residual block, optionally with adaptive soft thresholding.

    Main path: BN -> ReLU -> conv -> BN -> ReLU -> conv [-> soft threshold].
    The shortcut is the identity, or a strided 1x1 convolution when the
    block changes width or channel count.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        kernel_width: int,
        mode: Optional[ShrinkageMode],
        fc_hidden: Optional[int],
        rng: np.random.Generator,
        shrink_rng: np.random.Generator,
        dtype=np.float64,
    ):
        padding = kernel_width // 2
        self.bn1 = BatchNorm1d(in_channels, dtype=dtype)
        self.conv1 = Conv1d(in_channels, out_channels, kernel_width, stride, padding, rng, dtype)
        self.bn2 = BatchNorm1d(out_channels, dtype=dtype)
        self.conv2 = Conv1d(out_channels, out_channels, kernel_width, 1, padding, rng, dtype)
        self.downsample: Optional[Conv1d] = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv1d(in_channels, out_channels, 1, stride, 0, rng, dtype)
        self.shrink: Optional[ThresholdSubnet] = None
        if mode is not None:
            self.shrink = ThresholdSubnet(out_channels, mode, fc_hidden, shrink_rng, dtype)

    def forward(
        self, x: Tensor, thresholds: Optional[List[ThresholdResult]] = None
    ) -> Tensor:
        out = self.conv1.forward(self.bn1.forward(x).relu())
        out = self.conv2.forward(self.bn2.forward(out).relu())
        if self.shrink is not None:
            result = compute_threshold(out, self.shrink)
            if thresholds is not None:
                thresholds.append(result)
            out = soft_threshold(out, result)
        shortcut = x if self.downsample is None else self.downsample.forward(x)
        if out.shape != shortcut.shape:
            raise DimensionError(
                f"residual branch {list(out.shape)} does not match shortcut "
                f"{list(shortcut.shape)}"
            )
        return out + shortcut


class ShrinkageNetwork(Module):
    def __init__(self, config: ModelConfig, kind: ModelKind = ModelKind.drsn):
        config.validate()
        self.config = config
        self.kind = kind
        dtype = config.precision.dtype
        rng = np.random.default_rng([config.seed, 0])
        shrink_rng = np.random.default_rng([config.seed, 1])
        mode = config.mode if kind is ModelKind.drsn else None
        k = config.kernel_width
        self.stem = Conv1d(config.input_channels, config.stem_channels, k, 1, k // 2, rng, dtype)
        self.blocks: List[ResidualShrinkageBlock] = []
        channels = config.stem_channels
        for out_channels, count in zip(config.stage_channels, config.blocks_per_stage):
            for i in range(count):
                self.blocks.append(
                    ResidualShrinkageBlock(
                        channels,
                        out_channels,
                        2 if i == 0 else 1,
                        k,
                        mode,
                        config.fc_hidden,
                        rng,
                        shrink_rng,
                        dtype,
                    )
                )
                channels = out_channels
        self.bn = BatchNorm1d(channels, dtype=dtype)
        self.fc = Dense(channels, config.num_classes, rng, dtype)

    @property
    def dtype(self):
        return self.config.precision.dtype

    def forward(
        self, x: Tensor, thresholds: Optional[List[ThresholdResult]] = None
    ) -> Tensor:
        """
        Logits ``[batch, num_classes]`` for inputs ``[batch, channels, width]``.

        When ``thresholds`` is given, every block's ThresholdResult is appended
        to it in block order.
        """
        expected = (self.config.input_channels, self.config.input_width)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise DimensionError(
                f"model expects [batch, {expected[0]}, {expected[1]}], got {list(x.shape)}"
            )
        if x.dtype != self.dtype:
            x = Tensor(x.values, dtype=self.dtype)
        out = self.stem.forward(x)
        for block in self.blocks:
            out = block.forward(out, thresholds)
        out = self.bn.forward(out).relu()
        return self.fc.forward(gap(out, PoolOver.width))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters in definition order, then batch-norm running statistics."""
        state = {name: np.array(p.values) for name, p in self.named_parameters()}
        for name, owner, attr in self.named_buffers():
            state[name] = np.array(getattr(owner, attr))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        for name in state:
            if name not in own:
                raise CheckpointShapeError(name, "is not part of this model")
        for name, current in own.items():
            if name not in state:
                raise CheckpointShapeError(name, "is missing")
            if tuple(np.shape(state[name])) != current.shape:
                raise CheckpointShapeError(
                    name,
                    f"has shape {list(np.shape(state[name]))}, the model expects "
                    f"{list(current.shape)}",
                )
        params = dict(self.named_parameters())
        for name, owner, attr in self.named_buffers():
            setattr(owner, attr, np.array(state[name], dtype=self.dtype))
        for name, param in params.items():
            param.assign(np.asarray(state[name], dtype=self.dtype))


def build_drsn(config: ModelConfig) -> ShrinkageNetwork:
    return ShrinkageNetwork(config, ModelKind.drsn)


def build_cnn_baseline(config: ModelConfig) -> ShrinkageNetwork:
    return ShrinkageNetwork(config, ModelKind.cnn)


def build_model(config: ModelConfig, kind: ModelKind) -> ShrinkageNetwork:
    return ShrinkageNetwork(config, kind)


def count_parameters(config: ModelConfig, shrinkage: bool = True) -> int:
    """
    Trainable parameter count of a network, computed from the config alone.

    >>> count_parameters(ModelConfig(), shrinkage=False) < count_parameters(ModelConfig())
    True
    """
    k = config.kernel_width
    total = config.input_channels * k * config.stem_channels + config.stem_channels
    cin = config.stem_channels
    for c, count in zip(config.stage_channels, config.blocks_per_stage):
        for i in range(count):
            total += 2 * cin + (cin * c * k + c)  # bn1, conv1
            total += 2 * c + (c * c * k + c)  # bn2, conv2
            if i == 0 or cin != c:
                total += cin * c + c
            if shrinkage:
                hidden = c if config.fc_hidden is None else config.fc_hidden
                out = 1 if config.mode is ShrinkageMode.cs else c
                total += c * hidden + hidden + hidden * out + out
            cin = c
    return total + 2 * cin + cin * config.num_classes + config.num_classes
