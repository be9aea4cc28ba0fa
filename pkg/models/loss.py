"""YOLOv5 风格的训练损失

正样本分配：目标与 anchor 的宽高比（双向取最大）小于 anchor_t 即匹配，并沿用
中心所在格以及两个最近的相邻格。损失由三项组成：
  box: 所有正样本上 1 − CIoU 的均值
  obj: 以截断到非负的 CIoU 为目标的 BCE，各层乘以平衡系数
  cls: 正样本上的 BCE（单类别也计算）
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from engine import functional as F
from engine.tensor import Tensor
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

BALANCE = {3: (4.0, 1.0, 0.4), 4: (4.0, 1.0, 0.25, 0.06)}
NEIGHBOR_OFFSETS = np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], dtype=np.float64)


@dataclass
class LossWeights:
    box_w: float = 0.05
    obj_w: float = 1.0
    cls_w: float = 0.5
    balance: Tuple[float, ...] = ()
    anchor_t: float = 4.0

    def __post_init__(self):
        weights = (self.box_w, self.obj_w, self.cls_w)
        if min(weights) < 0 or max(weights) <= 0:
            raise ConfigError(f"损失权重必须非负且至少一个为正: {weights}")

    def level_balance(self, levels: int) -> Tuple[float, ...]:
        if self.balance:
            if len(self.balance) != levels:
                raise ConfigError(f"平衡系数个数 {len(self.balance)} 与层数 {levels} 不一致")
            return tuple(self.balance)
        return BALANCE.get(levels, (1.0,) * levels)


@dataclass
class LossItems:
    total: Tensor
    box: float
    obj: float
    cls: float

    def as_dict(self) -> Dict[str, float]:
        return {"total": float(self.total.data), "box": self.box, "obj": self.obj, "cls": self.cls}


@dataclass
class LevelTargets:
    image: np.ndarray
    anchor: np.ndarray
    gj: np.ndarray
    gi: np.ndarray
    tbox: np.ndarray
    anchor_wh: np.ndarray
    cls: np.ndarray

    def __len__(self):
        return len(self.image)


def build_targets(
    targets: np.ndarray,
    grid_shapes: Sequence[Tuple[int, int]],
    anchors: Sequence,
    strides: Sequence[int],
    anchor_t: float = 4.0,
) -> List[LevelTargets]:
    """为每层分配正样本

    Args:
        targets: (M, 6) [image, class, cx, cy, w, h]，坐标单位为输入像素
        grid_shapes: 每层 (h, w)

    Returns:
        每层一个 LevelTargets，tbox 为格内偏移 + 宽高（格单位）
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 6)
    g = 0.5
    result = []
    for (h, w), level_anchors, stride in zip(grid_shapes, anchors, strides):
        anchor_g = np.asarray(level_anchors, dtype=np.float64).reshape(-1, 2) / stride
        gxy_all = targets[:, 2:4] / stride
        gwh_all = targets[:, 4:6] / stride
        ratio = gwh_all[None] / anchor_g[:, None]
        matched = np.maximum(ratio, 1 / ratio).max(axis=2) < anchor_t
        a_idx, t_idx = np.nonzero(matched)

        gxy = gxy_all[t_idx]
        gxi = np.array([w, h], dtype=np.float64) - gxy
        j, k = ((gxy % 1 < g) & (gxy > 1)).T
        l, m = ((gxi % 1 < g) & (gxi > 1)).T
        masks = np.stack([np.ones_like(j), j, k, l, m])

        sel_a, sel_t, sel_off = [], [], []
        for mask, offset in zip(masks, NEIGHBOR_OFFSETS * g):
            sel_a.append(a_idx[mask])
            sel_t.append(t_idx[mask])
            sel_off.append(np.repeat(offset[None], mask.sum(), axis=0))
        a_sel = np.concatenate(sel_a)
        t_sel = np.concatenate(sel_t)
        offsets = np.concatenate(sel_off) if sel_off else np.zeros((0, 2))

        gxy_sel = gxy_all[t_sel]
        gij = np.floor(gxy_sel - offsets).astype(np.int64)
        gi = np.clip(gij[:, 0], 0, w - 1)
        gj = np.clip(gij[:, 1], 0, h - 1)
        tbox = np.concatenate([gxy_sel - np.stack([gi, gj], axis=1), gwh_all[t_sel]], axis=1)
        result.append(
            LevelTargets(
                image=targets[t_sel, 0].astype(np.int64),
                anchor=a_sel,
                gj=gj,
                gi=gi,
                tbox=tbox,
                anchor_wh=anchor_g[a_sel],
                cls=targets[t_sel, 1].astype(np.int64),
            )
        )
    return result


def bbox_ciou(pxy: Tensor, pwh: Tensor, txy: np.ndarray, twh: np.ndarray, eps: float = 1e-7) -> Tensor:
    """预测框与目标框（cx, cy, w, h）的 CIoU；目标不求导，alpha 按常数处理"""
    px, py = pxy[:, 0], pxy[:, 1]
    pw, ph = pwh[:, 0], pwh[:, 1]
    tx, ty, tw, th = txy[:, 0], txy[:, 1], twh[:, 0], twh[:, 1]

    b1x1, b1x2 = px - pw * 0.5, px + pw * 0.5
    b1y1, b1y2 = py - ph * 0.5, py + ph * 0.5
    b2x1, b2x2 = tx - tw / 2, tx + tw / 2
    b2y1, b2y2 = ty - th / 2, ty + th / 2

    inter_w = F.clamp_min(F.minimum(b1x2, b2x2) - F.maximum(b1x1, b2x1), 0.0)
    inter_h = F.clamp_min(F.minimum(b1y2, b2y2) - F.maximum(b1y1, b2y1), 0.0)
    inter = inter_w * inter_h
    union = pw * ph + tw * th - inter + eps
    iou = inter / union

    cw = F.maximum(b1x2, b2x2) - F.minimum(b1x1, b2x1)
    ch = F.maximum(b1y2, b2y2) - F.minimum(b1y1, b2y1)
    c2 = cw * cw + ch * ch + eps
    dx = b2x1 + b2x2 - b1x1 - b1x2
    dy = b2y1 + b2y2 - b1y1 - b1y2
    rho2 = (dx * dx + dy * dy) * 0.25
    diff = np.arctan(tw / th) - F.atan(pw / (ph + eps))
    v = diff * diff * (4 / math.pi**2)
    alpha = v.data / (v.data - iou.data + (1 + eps))
    return iou - (rho2 / c2 + v * alpha)


def compute_loss(
    heads: Sequence[Tensor],
    targets: np.ndarray,
    anchors: Sequence,
    strides: Sequence[int],
    weights: LossWeights = None,
    ncls: int = 1,
) -> LossItems:
    """组合损失，返回总损失张量（乘以 batch 大小）与各分量"""
    weights = weights or LossWeights()
    na = len(anchors[0])
    no = 5 + ncls
    grid_shapes = []
    for raw in heads:
        if raw.ndim != 4 or raw.shape[1] != na * no:
            raise ShapeError(f"检测头输出形状 {raw.shape} 与 {na}×{no} 通道不一致")
        grid_shapes.append(raw.shape[2:])
    batch = heads[0].shape[0]
    balance = weights.level_balance(len(heads))
    assigned = build_targets(targets, grid_shapes, anchors, strides, weights.anchor_t)

    box_terms, cls_terms = [], []
    lobj = None
    for raw, level, bal in zip(heads, assigned, balance):
        n, _, h, w = raw.shape
        p = F.reshape(raw, (n, na, no, h, w))
        tobj = np.zeros((n, na, h, w), dtype=raw.dtype)
        if len(level):
            ps = p[level.image, level.anchor, :, level.gj, level.gi]
            pxy = F.sigmoid(ps[:, 0:2]) * 2 - 0.5
            sw = F.sigmoid(ps[:, 2:4]) * 2
            pwh = sw * sw * level.anchor_wh
            iou = bbox_ciou(pxy, pwh, level.tbox[:, :2], level.tbox[:, 2:])
            box_terms.append(1.0 - iou)
            tobj[level.image, level.anchor, level.gj, level.gi] = np.clip(iou.data, 0, None)
            tcls = np.zeros((len(level), ncls), dtype=raw.dtype)
            tcls[np.arange(len(level)), level.cls] = 1.0
            cls_terms.append(F.reshape(F.bce_with_logits(ps[:, 5:], tcls), (-1,)))
        term = F.mean(F.bce_with_logits(p[:, :, 4], tobj)) * bal
        lobj = term if lobj is None else lobj + term

    zero = Tensor(np.zeros((), dtype=heads[0].dtype))
    lbox = F.mean(F.concat(box_terms, axis=0)) if box_terms else zero
    lcls = F.mean(F.concat(cls_terms, axis=0)) if cls_terms else zero
    total = (lbox * weights.box_w + lobj * weights.obj_w + lcls * weights.cls_w) * batch
    return LossItems(total, float(lbox.data), float(lobj.data), float(lcls.data))
