"""张量核心使用的规格类型"""

from dataclasses import dataclass
from typing import NamedTuple, Tuple

from utils.errors import ConfigError, ShapeError


def _pair(value) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ConfigError(f"期望二元组，得到 {value!r}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


class Shape(NamedTuple):
    """batch/channel/height/width 四元组"""

    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, array) -> "Shape":
        if array.ndim != 4:
            raise ShapeError(f"期望 4 维张量 (n,c,h,w)，实际维数 {array.ndim}")
        shape = cls(*(int(d) for d in array.shape))
        for name, value in shape._asdict().items():
            if value < 1:
                raise ShapeError(f"维度 {name} 必须 >= 1，实际 {value}")
        return shape


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ConfigError(
                f"通道数与分组数必须 >= 1: in={self.in_channels}, "
                f"out={self.out_channels}, groups={self.groups}"
            )
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"in_channels={self.in_channels} 与 out_channels={self.out_channels} "
                f"必须能被 groups={self.groups} 整除"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigError(f"kernel/stride 必须 >= 1: {self.kernel}, {self.stride}")
        if min(self.padding) < 0:
            raise ConfigError(f"padding 不能为负: {self.padding}")

    @classmethod
    def same(cls, in_channels, out_channels, kernel=1, stride=1, groups=1, has_bias=False):
        """奇数卷积核的 same 填充 pad=(k-1)/2"""
        kh, kw = _pair(kernel)
        return cls(
            in_channels,
            out_channels,
            (kh, kw),
            stride,
            ((kh - 1) // 2, (kw - 1) // 2),
            groups,
            has_bias,
        )

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel[0],
            self.kernel[1],
        )

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels and self.groups > 1

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def param_count(self) -> int:
        kh, kw = self.kernel
        count = kh * kw * (self.in_channels // self.groups) * self.out_channels
        return count + (self.out_channels if self.has_bias else 0)

    def flops(self, h_out: int, w_out: int) -> int:
        # 乘加计 2 FLOPs
        kh, kw = self.kernel
        return 2 * kh * kw * (self.in_channels // self.groups) * self.out_channels * h_out * w_out
