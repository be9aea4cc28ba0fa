"""Ghost 模块与 LHAB-Gbneck"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from engine import functional as F
from engine.module import ConvBnAct, Identity, Module, Sequential
from engine.specs import Conv2dSpec
from engine.tensor import Tensor
from models.attention import build_attention
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GhostModuleSpec:
    """
    Args:
        in_channels: 输入通道 C
        out_channels: 输出通道 D
        ratio: 每个本征图生成的 ghost 图数量 s
        cheap_kernel: 廉价操作（深度卷积）核大小 d
        primary_kernel: 主卷积核大小 k
        act: 激活函数，None 表示不加激活
    """

    in_channels: int
    out_channels: int
    ratio: int = 1
    cheap_kernel: int = 3
    primary_kernel: int = 1
    act: str = "relu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"通道数必须 >= 1: C={self.in_channels}, D={self.out_channels}")
        if self.ratio < 1:
            raise ConfigError(f"ratio s 必须 >= 1，实际 {self.ratio}")
        if self.cheap_kernel % 2 == 0 or self.primary_kernel % 2 == 0:
            raise ConfigError(f"卷积核必须为奇数: d={self.cheap_kernel}, k={self.primary_kernel}")
        if self.ratio == 1 and self.out_channels % 2:
            raise ConfigError(f"s=1 时输出通道 D 必须为偶数，实际 {self.out_channels}")

    @property
    def intrinsic(self) -> int:
        return math.ceil(self.out_channels / (1 + self.ratio))

    @property
    def primary(self) -> Conv2dSpec:
        return Conv2dSpec.same(self.in_channels, self.intrinsic, self.primary_kernel)

    @property
    def cheap(self) -> Conv2dSpec:
        m = self.intrinsic
        return Conv2dSpec.same(m, m * self.ratio, self.cheap_kernel, groups=m)


class GhostModule(Module):
    """Y1 = 主卷积(X)，Y2 = 深度卷积(Y1)，输出 concat(Y1, Y2) 截断到 D 个通道"""

    def __init__(self, spec: GhostModuleSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.primary_conv = ConvBnAct(spec.primary, spec.act, rng)
        self.cheap_operation = ConvBnAct(spec.cheap, spec.act, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"Ghost 模块: 输入通道 {x.shape[1]} 与 C={self.spec.in_channels} 不一致")
        y1 = self.primary_conv(x)
        y2 = self.cheap_operation(y1)
        out = F.concat_channels([y1, y2])
        if out.shape[1] > self.spec.out_channels:
            out = out[:, : self.spec.out_channels]
        return out


@dataclass(frozen=True)
class GbneckSpec:
    in_channels: int
    exp_channels: int
    out_channels: int
    stride: int = 1
    use_lhab: bool = False
    dw_kernel: int = 3
    # use_lhab 为真时实际放置的注意力类型，消融时替换为 se/eca 等
    attention: str = "lhab"

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"stride 只能为 1 或 2，实际 {self.stride}")
        if self.dw_kernel % 2 == 0:
            raise ConfigError(f"dw_kernel 必须为奇数，实际 {self.dw_kernel}")

    @property
    def has_identity_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


class Gbneck(Module):
    """两个 Ghost 模块加残差；stride 2 时在第一个 Ghost 模块后接深度卷积下采样"""

    def __init__(self, spec: GbneckSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.ghost1 = GhostModule(GhostModuleSpec(spec.in_channels, spec.exp_channels), rng)
        if spec.stride == 2:
            self.conv_dw = ConvBnAct(
                Conv2dSpec.same(
                    spec.exp_channels,
                    spec.exp_channels,
                    spec.dw_kernel,
                    stride=2,
                    groups=spec.exp_channels,
                ),
                None,
                rng,
            )
        else:
            self.conv_dw = None
        kind = spec.attention if spec.use_lhab else "none"
        self.attn = build_attention(kind, spec.exp_channels, rng)
        self.ghost2 = GhostModule(
            GhostModuleSpec(spec.exp_channels, spec.out_channels, act=None), rng
        )
        if spec.has_identity_shortcut:
            self.shortcut = Identity()
        else:
            self.shortcut = Sequential(
                [
                    ConvBnAct(
                        Conv2dSpec.same(
                            spec.in_channels,
                            spec.in_channels,
                            spec.dw_kernel,
                            stride=spec.stride,
                            groups=spec.in_channels,
                        ),
                        None,
                        rng,
                    ),
                    ConvBnAct(Conv2dSpec(spec.in_channels, spec.out_channels), None, rng),
                ]
            )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"Gbneck: 输入通道 {x.shape[1]} 与 in_channels={self.spec.in_channels} 不一致")
        y = self.ghost1(x)
        if self.conv_dw is not None:
            y = self.conv_dw(y)
        y = self.attn(y)
        y = self.ghost2(y)
        return F.add(y, self.shortcut(x))


def standard_conv_spec(spec: GhostModuleSpec) -> Conv2dSpec:
    """与 Ghost 模块等价的普通卷积 C→D（k×k）"""
    return Conv2dSpec.same(spec.in_channels, spec.out_channels, spec.primary_kernel)
