"""LHAB-GhostNet 主干

17 行结构：3×3 stride-2 stem 加 16 个 LHAB-Gbneck，分为 5 个 stage，
stage 1/2/3 的末端与 stage 5 (+HSI-Former) 的输出作为四个多尺度特征。
"""

import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from engine.module import ConvBnAct, Module, ModuleList
from engine.specs import Conv2dSpec
from engine.tensor import Tensor
from models.attention import ATTENTION_KINDS, make_divisible
from models.ghost import Gbneck, GbneckSpec
from models.hsi_former import HsiFormer, HsiFormerSpec
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageRow:
    kind: str
    exp: int
    out: int
    lhab: bool
    stride: int
    stage: int


# (kind, exp, out, lhab, stride, stage)
BACKBONE_ROWS: Tuple[StageRow, ...] = tuple(
    StageRow(*row)
    for row in (
        ("stem", 0, 16, False, 2, 0),
        ("gbneck", 16, 16, False, 1, 1),
        ("gbneck", 48, 24, False, 2, 1),
        ("gbneck", 72, 24, False, 1, 2),
        ("gbneck", 72, 40, True, 2, 2),
        ("gbneck", 120, 40, True, 1, 3),
        ("gbneck", 240, 80, False, 2, 3),
        ("gbneck", 184, 80, False, 1, 4),
        ("gbneck", 184, 80, False, 1, 4),
        ("gbneck", 184, 80, False, 1, 4),
        ("gbneck", 480, 112, True, 1, 4),
        ("gbneck", 672, 112, True, 1, 4),
        ("gbneck", 672, 160, True, 2, 4),
        ("gbneck", 960, 160, False, 1, 5),
        ("gbneck", 960, 160, True, 1, 5),
        ("gbneck", 960, 160, False, 1, 5),
        ("gbneck", 960, 160, True, 1, 5),
    )
)

# 输出特征取自这些 stage 的末端
TAP_STAGES = {"p2": 1, "p3": 2, "p4": 3, "p5": 5}


class FeatureTaps(NamedTuple):
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor


@dataclass(frozen=True)
class BackboneSpec:
    rows: Tuple[StageRow, ...] = BACKBONE_ROWS
    width_multiplier: float = 1.0
    input_size: int = 640
    in_channels: int = 3
    attention: str = "lhab"
    use_hsi: bool = True
    hsi_layers: int = 1
    hsi_order: int = 3

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise ConfigError(f"宽度系数必须为正，实际 {self.width_multiplier}")
        if self.input_size % 32:
            raise ConfigError(f"输入尺寸 {self.input_size} 必须能被 32 整除")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"未知注意力类型 {self.attention!r}")
        if self.rows[0].kind != "stem":
            raise ConfigError("第一行必须是 stem 卷积")

    def width(self, channels: int) -> int:
        if self.width_multiplier == 1.0:
            return channels
        return make_divisible(channels * self.width_multiplier, 4)

    def gbneck_specs(self) -> List[GbneckSpec]:
        specs = []
        in_channels = self.width(self.rows[0].out)
        for row in self.rows[1:]:
            out = self.width(row.out)
            specs.append(
                GbneckSpec(
                    in_channels,
                    self.width(row.exp),
                    out,
                    row.stride,
                    row.lhab,
                    attention=self.attention,
                )
            )
            in_channels = out
        return specs

    def tap_rows(self) -> dict:
        """每个输出特征对应的 gbneck 下标（stage 内最后一行）"""
        last = {}
        for index, row in enumerate(self.rows[1:]):
            last[row.stage] = index
        return {name: last[stage] for name, stage in TAP_STAGES.items()}

    @property
    def tap_channels(self) -> Tuple[int, int, int, int]:
        specs = self.gbneck_specs()
        return tuple(specs[i].out_channels for i in self.tap_rows().values())

    def hsi_spec(self) -> Optional[HsiFormerSpec]:
        if not self.use_hsi:
            return None
        return HsiFormerSpec(self.tap_channels[-1], self.hsi_layers, self.hsi_order)

    def shape_walk(self, input_size: int = None) -> List[Tuple[int, int, int]]:
        """不实际计算，按规格推出 17 行各自的输出 (c, h, w)"""
        size = input_size or self.input_size
        stem = Conv2dSpec.same(self.in_channels, self.width(self.rows[0].out), 3, stride=2)
        h, w = stem.output_hw(size, size)
        shapes = [(stem.out_channels, h, w)]
        for spec in self.gbneck_specs():
            if spec.stride == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
            shapes.append((spec.out_channels, h, w))
        return shapes

    def with_overrides(self, **kwargs) -> "BackboneSpec":
        return replace(self, **kwargs)


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        stem_out = spec.width(spec.rows[0].out)
        self.stem = ConvBnAct(
            Conv2dSpec.same(spec.in_channels, stem_out, 3, stride=spec.rows[0].stride),
            "hswish",
            rng,
        )
        self.blocks = ModuleList([Gbneck(s, rng) for s in spec.gbneck_specs()])
        hsi_spec = spec.hsi_spec()
        self.hsi = HsiFormer(hsi_spec, rng) if hsi_spec is not None else None
        self._taps = {index: name for name, index in spec.tap_rows().items()}
        logger.debug(
            f"主干构建完成: 宽度系数 {spec.width_multiplier}, 输出通道 {spec.tap_channels}, "
            f"HSI-Former {'开启' if hsi_spec else '关闭'}"
        )

    def forward_rows(self, x: Tensor):
        """逐行产出 (行号, 输出)，第 0 行为 stem"""
        y = self.stem(x)
        yield 0, y
        for index, block in enumerate(self.blocks):
            y = block(y)
            yield index + 1, y

    def forward(self, x: Tensor) -> FeatureTaps:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"主干输入应为 (n,{self.spec.in_channels},h,w)，实际 {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(f"输入尺寸 height={x.shape[2]}, width={x.shape[3]} 必须能被 32 整除")
        taps = {}
        for row, y in self.forward_rows(x):
            name = self._taps.get(row - 1)
            if name is not None:
                taps[name] = y
        if self.hsi is not None:
            taps["p5"] = self.hsi(taps["p5"])
        return FeatureTaps(**taps)
