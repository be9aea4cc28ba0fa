"""高阶空间交互：gnConv 与 HSI-Former 块

gnConv 把 1×1 投影后的 2C 个通道切成 [a_0, b_0, ..., b_{n-1}]，
逐阶计算 a_{i+1} = h_i(a_i) * DW_i(b_i)，最后 1×1 投影回 C 个通道。
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from engine import functional as F
from engine.module import BatchNorm2d, Conv2d, Identity, Module, ModuleList, Sequential
from engine.specs import Conv2dSpec
from engine.tensor import Tensor
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


def channel_schedule(channels: int, order: int) -> List[int]:
    """C_i = C / 2^(n-i-1)，i = 0..n-1；a_0 的宽度为 C_0

    Args:
        channels: 通道数 C
        order: 阶数 n

    Returns:
        [C_0, ..., C_{n-1}]，满足 C_0 + sum(C_i) == 2C
    """
    if order < 1:
        raise ConfigError(f"阶数 n 必须 >= 1，实际 {order}")
    if channels < 1 or channels % (2 ** (order - 1)):
        raise ConfigError(f"通道数 C={channels} 必须能被 2^(n-1)={2 ** (order - 1)} 整除")
    return [channels // 2 ** (order - i - 1) for i in range(order)]


@dataclass(frozen=True)
class GnConvSpec:
    channels: int
    order: int = 3
    dw_kernel: int = 7
    schedule: tuple = field(default=())

    def __post_init__(self):
        expected = tuple(channel_schedule(self.channels, self.order))
        if self.schedule and tuple(self.schedule) != expected:
            raise ConfigError(f"通道分配 {self.schedule} 与 C={self.channels}, n={self.order} 不一致")
        object.__setattr__(self, "schedule", expected)
        if self.dw_kernel % 2 == 0:
            raise ConfigError(f"深度卷积核必须为奇数，实际 {self.dw_kernel}")

    @property
    def split_sizes(self) -> List[int]:
        return [self.schedule[0], *self.schedule]


@dataclass(frozen=True)
class HsiFormerSpec:
    channels: int
    layers: int = 1
    order: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"层数 L 必须 >= 1，实际 {self.layers}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio 必须为正，实际 {self.mlp_ratio}")
        channel_schedule(self.channels, self.order)

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.channels * self.mlp_ratio)))


class GnConv(Module):
    def __init__(self, spec: GnConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        c, dims = spec.channels, spec.schedule
        self.proj_in = Conv2d(Conv2dSpec(c, 2 * c), rng)
        width = sum(dims)
        # 各阶的 DW-Conv_i 是逐通道的，合并成一个深度卷积后再切分
        self.dw_conv = Conv2d(Conv2dSpec.same(width, width, spec.dw_kernel, groups=width), rng)
        self.pw_convs = ModuleList(
            [Identity(), *[Conv2d(Conv2dSpec(dims[i - 1], dims[i]), rng) for i in range(1, len(dims))]]
        )
        self.proj_out = Conv2d(Conv2dSpec(c, c), rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ShapeError(f"gnConv: 输入通道 {x.shape[1]} 与 C={self.spec.channels} 不一致")
        dims = self.spec.schedule
        a, b = F.split_channels(self.proj_in(x), [dims[0], sum(dims)])
        gates = F.split_channels(self.dw_conv(b), dims)
        for h, g in zip(self.pw_convs, gates):
            a = F.mul(h(a), g)
        return self.proj_out(a)


class Mlp(Module):
    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Conv2d(Conv2dSpec(channels, hidden, has_bias=True), rng)
        self.fc2 = Conv2d(Conv2dSpec(hidden, channels, has_bias=True), rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.hswish(self.fc1(x)))


class HsiFormerLayer(Module):
    """x = x + gnConv(BN(x))；x = x + MLP(BN(x))"""

    def __init__(self, spec: HsiFormerSpec, rng: np.random.Generator):
        super().__init__()
        self.norm1 = BatchNorm2d(spec.channels)
        self.gnconv = GnConv(GnConvSpec(spec.channels, spec.order), rng)
        self.norm2 = BatchNorm2d(spec.channels)
        self.mlp = Mlp(spec.channels, spec.hidden, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = F.add(x, self.gnconv(self.norm1(x)))
        return F.add(x, self.mlp(self.norm2(x)))


class HsiFormer(Sequential):
    def __init__(self, spec: HsiFormerSpec, rng: np.random.Generator):
        super().__init__([HsiFormerLayer(spec, rng) for _ in range(spec.layers)])
        object.__setattr__(self, "spec", spec)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ShapeError(f"HSI-Former: 输入通道 {x.shape[1]} 与 C={self.spec.channels} 不一致")
        return super().forward(x)
