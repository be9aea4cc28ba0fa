"""检测头输出的解码与非极大值抑制"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from engine.tensor import Tensor
from utils.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    """输入图像像素坐标下的检测框 (cx, cy, w, h)"""

    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_id: int
    score: float

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    @property
    def xyxy(self) -> Tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """两组 xyxy 框的两两 IoU，形状 (len(a), len(b))"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


# -------------------------------------------------------------------------------------------
# 解码
# -------------------------------------------------------------------------------------------
def decode_level(
    raw: np.ndarray, anchors: Sequence[Sequence[float]], stride: int, ncls: int
) -> np.ndarray:
    """单层输出 (n, A·(5+ncls), h, w) 解码为 (n, A·h·w, 5+ncls)

    每行为 [cx, cy, w, h, obj, cls_prob...]，坐标单位为输入像素。
    """
    raw = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    na, no = len(anchors), 5 + ncls
    n, c, h, w = raw.shape
    if c != na * no:
        raise ShapeError(f"检测头通道数 {c} 应为 {na}×{no}={na * no}")
    p = _sigmoid(raw.astype(np.float64).reshape(n, na, no, h, w).transpose(0, 1, 3, 4, 2))
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty_like(p)
    out[..., 0] = (p[..., 0] * 2 - 0.5 + gx) * stride
    out[..., 1] = (p[..., 1] * 2 - 0.5 + gy) * stride
    out[..., 2] = (p[..., 2] * 2) ** 2 * anchors[None, :, None, None, 0]
    out[..., 3] = (p[..., 3] * 2) ** 2 * anchors[None, :, None, None, 1]
    out[..., 4:] = p[..., 4:]
    return out.reshape(n, na * h * w, no)


def decode(
    heads: Sequence, anchors: Sequence, strides: Sequence[int], conf_threshold: float, ncls: int = 1
) -> List[List[Detection]]:
    """把各层检测头输出解码成每张图的候选框，保留 objectness·class ≥ conf_threshold 的结果"""
    if len(heads) != len(anchors) or len(heads) != len(strides):
        raise ShapeError(f"检测头数量 {len(heads)} 与 anchor 组 {len(anchors)}/步长 {len(strides)} 不一致")
    rows = np.concatenate(
        [decode_level(raw, a, s, ncls) for raw, a, s in zip(heads, anchors, strides)], axis=1
    )
    results = []
    for image in rows:
        cls_prob = image[:, 5:]
        class_id = cls_prob.argmax(axis=1)
        score = image[:, 4] * cls_prob[np.arange(len(image)), class_id]
        keep = np.nonzero(score >= conf_threshold)[0]
        results.append(
            [
                Detection(*map(float, image[k, :5]), int(class_id[k]), float(score[k]))
                for k in keep
            ]
        )
    return results


# -------------------------------------------------------------------------------------------
# NMS
# -------------------------------------------------------------------------------------------
def total_order(detections: Sequence[Detection]) -> List[int]:
    """按 score 降序，再按 cx, cy, w, h 升序"""
    if not detections:
        return []
    arr = np.array([(d.score, d.cx, d.cy, d.w, d.h) for d in detections], dtype=np.float64)
    return list(np.lexsort((arr[:, 4], arr[:, 3], arr[:, 2], arr[:, 1], -arr[:, 0])))


def greedy_nms(boxes_xyxy: np.ndarray, iou_threshold: float) -> List[int]:
    """boxes 已按优先级排好序；IoU ≥ 阈值即被抑制，返回保留的下标"""
    x1, y1, x2, y2 = (boxes_xyxy[:, i] for i in range(4))
    areas = (x2 - x1) * (y2 - y1)
    order = np.arange(len(boxes_xyxy))
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        xx1 = np.maximum(x1[i], x1[rest])
        yy1 = np.maximum(y1[i], y1[rest])
        xx2 = np.minimum(x2[i], x2[rest])
        yy2 = np.minimum(y2[i], y2[rest])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        union = areas[i] + areas[rest] - inter
        ovr = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[ovr < iou_threshold]
    return keep


def nms(detections: Sequence[Detection], iou_threshold: float = 0.45, max_out: int = 300) -> List[Detection]:
    """逐类别贪心 NMS，结果按总序排列并截断到 max_out"""
    ordered = [detections[i] for i in total_order(detections)]
    survivors = []
    for class_id in sorted({d.class_id for d in ordered}):
        group = [d for d in ordered if d.class_id == class_id]
        boxes = cxcywh_to_xyxy([d.box for d in group])
        survivors.extend(group[i] for i in greedy_nms(boxes, iou_threshold))
    return [survivors[i] for i in total_order(survivors)][:max_out]
