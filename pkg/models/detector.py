"""检测器：四层 PANet 颈部、检测头与整体装配

颈部自顶向下把 p5 逐级上采样与浅层特征拼接融合到 p2，再自底向上下采样回 p5，
融合块为两个堆叠的 stride-1 Gbneck。关闭 P_tiny 分支时退化为 p3/p4/p5 三层。
"""

import logging
import math
from typing import List, Sequence

import numpy as np

from engine import functional as F
from engine.module import Conv2d, ConvBnAct, Module, ModuleList, Sequential
from engine.specs import Conv2dSpec
from engine.tensor import Tensor
from models.backbone import Backbone, BackboneSpec, FeatureTaps
from models.config import ModelConfig
from models.ghost import Gbneck, GbneckSpec
from models.postprocess import Detection, decode, nms
from utils.errors import ShapeError

logger = logging.getLogger(__name__)


def fusion_block(in_channels: int, out_channels: int, rng: np.random.Generator) -> Sequential:
    exp = 3 * out_channels
    return Sequential(
        [
            Gbneck(GbneckSpec(in_channels, exp, out_channels), rng),
            Gbneck(GbneckSpec(out_channels, exp, out_channels), rng),
        ]
    )


class Neck(Module):
    def __init__(self, channels: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.channels = tuple(channels)
        chs = self.channels
        levels = len(chs)
        # 下标 i 对应第 i 层（由浅到深）
        self.laterals = ModuleList(
            [ConvBnAct(Conv2dSpec(chs[i + 1], chs[i]), "hswish", rng) for i in range(levels - 1)]
        )
        self.td_fuse = ModuleList([fusion_block(2 * chs[i], chs[i], rng) for i in range(levels - 1)])
        self.downs = ModuleList(
            [
                ConvBnAct(Conv2dSpec.same(chs[i], chs[i], 3, stride=2), "hswish", rng)
                for i in range(levels - 1)
            ]
        )
        self.bu_fuse = ModuleList([fusion_block(2 * chs[i], chs[i + 1], rng) for i in range(levels - 1)])

    def forward(self, taps: Sequence[Tensor]) -> List[Tensor]:
        taps = list(taps)
        if len(taps) != len(self.channels):
            raise ShapeError(f"颈部需要 {len(self.channels)} 层特征，实际 {len(taps)}")
        for i, (t, c) in enumerate(zip(taps, self.channels)):
            if t.shape[1] != c:
                raise ShapeError(f"第 {i} 层特征通道 {t.shape[1]} 应为 {c}")
            if i and (t.shape[2] * 2 != taps[i - 1].shape[2] or t.shape[3] * 2 != taps[i - 1].shape[3]):
                raise ShapeError(
                    f"金字塔层级尺寸不匹配: {taps[i - 1].shape[2:]} 与 {t.shape[2:]} 不是 2 倍关系"
                )

        levels = len(taps)
        lats = [None] * (levels - 1)
        x = taps[-1]
        for i in range(levels - 2, -1, -1):
            lats[i] = self.laterals[i](x)
            x = self.td_fuse[i](F.concat_channels([F.upsample_nearest_2x(lats[i]), taps[i]]))
        outs = [x]
        for i in range(levels - 1):
            d = self.downs[i](outs[i])
            outs.append(self.bu_fuse[i](F.concat_channels([d, lats[i]])))
        return outs


class DetectHead(Module):
    """每层一个带偏置的 1×1 卷积，输出 A·(5+ncls) 个通道"""

    def __init__(self, channels: Sequence[int], strides: Sequence[int], ncls: int, rng, na: int = 3):
        super().__init__()
        self.ncls = ncls
        self.na = na
        no = 5 + ncls
        self.convs = ModuleList(
            [Conv2d(Conv2dSpec(c, na * no, has_bias=True), rng) for c in channels]
        )
        # 偏置初始化：先验 objectness 约为每 640² 图 8 个目标
        for conv, s in zip(self.convs, strides):
            b = conv.bias.data.reshape(na, no)
            b[:, 4] += math.log(8 / (640 / s) ** 2)
            b[:, 5:] += math.log(0.6 / (ncls - 0.99))

    def forward(self, maps: Sequence[Tensor]) -> List[Tensor]:
        return [conv(x) for conv, x in zip(self.convs, maps)]


class HsiShipNet(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone_spec = BackboneSpec(
            width_multiplier=config.width_multiplier,
            input_size=config.input_size,
            attention=config.attention,
            use_hsi=config.use_hsi,
            hsi_layers=config.hsi_layers,
            hsi_order=config.hsi_order,
        )
        self.backbone = Backbone(self.backbone_spec, rng)
        channels = self.backbone_spec.tap_channels[-config.levels :]
        self.neck = Neck(channels, rng)
        self.head = DetectHead(channels, config.strides, config.ncls, rng)

    def select_taps(self, taps: FeatureTaps) -> List[Tensor]:
        return list(taps)[-self.config.levels :]

    def forward(self, x: Tensor) -> List[Tensor]:
        taps = self.backbone(x)
        return self.head(self.neck(self.select_taps(taps)))

    def detect(
        self, x: Tensor, conf_threshold: float = None, iou_threshold: float = None
    ) -> List[List[Detection]]:
        """整图推理：主干 → 颈部 → 检测头 → 解码 → NMS，每张图一个检测列表"""
        cfg = self.config
        conf = cfg.conf_threshold if conf_threshold is None else conf_threshold
        iou = cfg.iou_threshold if iou_threshold is None else iou_threshold
        heads = self(x)
        candidates = decode(heads, cfg.level_anchors, cfg.strides, conf, cfg.ncls)
        return [nms(dets, iou, cfg.max_det) for dets in candidates]


def build_model(config: ModelConfig) -> HsiShipNet:
    model = HsiShipNet(config)
    model.eval()
    hsi = f"L={config.hsi_layers} n={config.hsi_order}" if config.use_hsi else "关闭"
    logger.info(
        f"模型构建完成: 宽度 {config.width_multiplier}, 层级 {config.levels}, "
        f"注意力 {config.attention}, HSI-Former {hsi}"
    )
    return model
