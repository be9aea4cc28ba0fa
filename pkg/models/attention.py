"""轻量混合注意力 LHAB 以及消融用的注意力变体

LHAB = 空间注意力 ∘ 通道注意力：
  通道注意力：max/avg 两路全局池化描述子分别经过独立的一维卷积，相加后 sigmoid 作为通道门控
  空间注意力：沿通道取 max/avg 得到两张单通道图，分别经过 7×7 卷积，相加后 sigmoid 作为空间门控
所有注意力卷积均不带偏置和归一化。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from engine import functional as F
from engine.module import Conv2d, Identity, Module, kaiming_uniform, parameter
from engine.specs import Conv2dSpec
from engine.tensor import Tensor
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

ATTENTION_KINDS = ("none", "se", "eca_avg", "eca_shared", "eca_dual", "lhab")


def make_divisible(value: float, divisor: int = 4) -> int:
    """四舍五入到 divisor 的倍数，最小为 divisor"""
    return max(divisor, int(value + divisor / 2) // divisor * divisor)


def psi_kernel_size(channels: int, gamma: float = 2, b: float = 1) -> int:
    """自适应一维卷积核大小：log2(C)/γ + b/γ 最近的奇数，距离相等时取较大者"""
    if channels < 1:
        raise ConfigError(f"通道数必须 >= 1，实际 {channels}")
    t = math.log2(channels) / gamma + b / gamma
    lower = 2 * math.floor((t - 1) / 2) + 1
    upper = lower + 2
    k = upper if (upper - t) <= (t - lower) + 1e-12 else lower
    return max(k, 1)


@dataclass(frozen=True)
class ChannelAttnSpec:
    channels: int
    gamma: float = 2
    b: float = 1
    k1: int = field(default=0)
    k2: int = field(default=0)

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"通道数必须 >= 1，实际 {self.channels}")
        k = psi_kernel_size(self.channels, self.gamma, self.b)
        if not self.k1:
            object.__setattr__(self, "k1", k)
        if not self.k2:
            object.__setattr__(self, "k2", k)
        for name in ("k1", "k2"):
            value = getattr(self, name)
            if value < 1 or value % 2 == 0:
                raise ConfigError(f"{name} 必须为正奇数，实际 {value}")


@dataclass(frozen=True)
class SpatialAttnSpec:
    kernel: int = 7

    @property
    def conv(self) -> Conv2dSpec:
        return Conv2dSpec.same(1, 1, self.kernel)


def _kernel1d(rng: np.random.Generator, k: int) -> Tensor:
    return parameter(kaiming_uniform(rng, (k,), k))


# -------------------------------------------------------------------------------------------
# 通道注意力
# -------------------------------------------------------------------------------------------
class ChannelAttention(Module):
    """双池化通道注意力，max 与 avg 两路的一维卷积不共享参数"""

    def __init__(self, spec: ChannelAttnSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.k_max = _kernel1d(rng, spec.k1)
        self.k_avg = _kernel1d(rng, spec.k2)

    def gate(self, u: Tensor) -> Tensor:
        if u.shape[1] != self.spec.channels:
            raise ShapeError(f"通道注意力: 输入通道 {u.shape[1]} 与 C={self.spec.channels} 不一致")
        d_max = F.conv1d_same(F.pool_spatial(u, "max"), self.k_max)
        d_avg = F.conv1d_same(F.pool_spatial(u, "avg"), self.k_avg)
        return F.sigmoid(F.add(d_max, d_avg))

    def forward(self, u: Tensor) -> Tensor:
        return F.gate(u, self.gate(u))


class EcaAvg(Module):
    """只用平均池化的 ECA"""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.kernel = _kernel1d(rng, psi_kernel_size(channels))

    def forward(self, u: Tensor) -> Tensor:
        g = F.sigmoid(F.conv1d_same(F.pool_spatial(u, "avg"), self.kernel))
        return F.gate(u, g)


class EcaShared(Module):
    """max/avg 两路描述子共享同一个一维卷积"""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.kernel = _kernel1d(rng, psi_kernel_size(channels))

    def forward(self, u: Tensor) -> Tensor:
        d_max = F.conv1d_same(F.pool_spatial(u, "max"), self.kernel)
        d_avg = F.conv1d_same(F.pool_spatial(u, "avg"), self.kernel)
        return F.gate(u, F.sigmoid(F.add(d_max, d_avg)))


# -------------------------------------------------------------------------------------------
# 空间注意力
# -------------------------------------------------------------------------------------------
class SpatialAttention(Module):
    def __init__(self, spec: SpatialAttnSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.conv_max = Conv2d(spec.conv, rng)
        self.conv_avg = Conv2d(spec.conv, rng)

    def gate(self, u: Tensor) -> Tensor:
        s_max = self.conv_max(F.pool_channel(u, "max"))
        s_avg = self.conv_avg(F.pool_channel(u, "avg"))
        return F.sigmoid(F.add(s_max, s_avg))

    def forward(self, u: Tensor) -> Tensor:
        return F.gate(u, self.gate(u))


class LHAB(Module):
    """通道注意力在前，空间注意力在后"""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channel = ChannelAttention(ChannelAttnSpec(channels), rng)
        self.spatial = SpatialAttention(SpatialAttnSpec(), rng)

    def forward(self, u: Tensor) -> Tensor:
        return self.spatial(self.channel(u))


class SqueezeExcite(Module):
    """原始 Ghost bottleneck 中的 SE，压缩比 1/4，带偏置"""

    def __init__(self, channels: int, rng: np.random.Generator, ratio: float = 0.25):
        super().__init__()
        reduced = make_divisible(channels * ratio, 4)
        self.reduce = Conv2d(Conv2dSpec(channels, reduced, has_bias=True), rng)
        self.expand = Conv2d(Conv2dSpec(reduced, channels, has_bias=True), rng)

    def forward(self, u: Tensor) -> Tensor:
        s = F.pool_spatial(u, "avg")
        s = self.expand(F.relu(self.reduce(s)))
        return F.gate(u, F.sigmoid(s))


def build_attention(kind: Optional[str], channels: int, rng: np.random.Generator) -> Module:
    kind = kind or "none"
    if kind == "none":
        return Identity()
    if kind == "lhab":
        return LHAB(channels, rng)
    if kind == "eca_dual":
        return ChannelAttention(ChannelAttnSpec(channels), rng)
    if kind == "eca_shared":
        return EcaShared(channels, rng)
    if kind == "eca_avg":
        return EcaAvg(channels, rng)
    if kind == "se":
        return SqueezeExcite(channels, rng)
    raise ConfigError(f"未知注意力类型 {kind!r}，可选: {', '.join(ATTENTION_KINDS)}")
