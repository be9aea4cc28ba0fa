"""以 1-IoU 为距离的 anchor 聚类

IoU 按左上角对齐的 (w, h) 计算。中心更新取簇内 w、h 的中位数，
只有当中位数不增大簇内距离之和时才采用，从而保证平均距离逐轮不增。
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from utils.errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass
class ClusterResult:
    centers: np.ndarray
    groups: List[np.ndarray]
    mean_distance: float
    iterations: int
    history: List[float] = field(default_factory=list)

    def format(self) -> str:
        return format_anchors(self.groups)


def iou_wh(a: Sequence[float], b: Sequence[float]) -> float:
    """两个左上角对齐的框的 IoU"""
    (wa, ha), (wb, hb) = a, b
    if min(wa, ha, wb, hb) <= 0:
        raise ConfigError(f"框的宽高必须为正: {tuple(a)}, {tuple(b)}")
    inter = min(wa, wb) * min(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def iou_wh_matrix(boxes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(boxes[:, None, 0], centers[None, :, 0]) * np.minimum(
        boxes[:, None, 1], centers[None, :, 1]
    )
    area_b = boxes[:, 0] * boxes[:, 1]
    area_c = centers[:, 0] * centers[:, 1]
    return inter / (area_b[:, None] + area_c[None, :] - inter)


def _seed_centers(boxes: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ 初始化，概率正比于到已选中心的 (1-IoU)²"""
    centers = [boxes[rng.integers(len(boxes))]]
    for _ in range(1, k):
        dist = (1 - iou_wh_matrix(boxes, np.array(centers))).min(axis=1)
        weight = dist**2
        total = weight.sum()
        if total <= 0:
            index = rng.integers(len(boxes))
        else:
            index = rng.choice(len(boxes), p=weight / total)
        centers.append(boxes[index])
    return np.array(centers, dtype=np.float64)


def kmeans_1iou(
    boxes,
    k: int = 12,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> ClusterResult:
    """
    Args:
        boxes: (N, 2) 的宽高，单位为输入像素
        k: 聚类数
        seed: 随机种子
        max_iter: 最大迭代轮数
        tol: 中心移动量小于该值时停止

    Returns:
        ClusterResult，中心按面积升序
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ConfigError(f"k 必须 >= 1，实际 {k}")
    if len(boxes) < k:
        raise DataError(f"框的数量 {len(boxes)} 少于聚类数 k={k}")
    if np.any(boxes <= 0):
        raise DataError("存在宽或高非正的框")

    rng = np.random.default_rng(seed)
    centers = _seed_centers(boxes, k, rng)
    dist = 1 - iou_wh_matrix(boxes, centers)
    assign = dist.argmin(axis=1)
    history = [float(dist[np.arange(len(boxes)), assign].mean())]

    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_centers = centers.copy()
        for c in range(k):
            members = boxes[assign == c]
            if len(members) == 0:
                # 空簇移到离自己中心最远的框
                farthest = dist[np.arange(len(boxes)), assign].argmax()
                new_centers[c] = boxes[farthest]
                continue
            candidate = np.median(members, axis=0)
            old_cost = (1 - iou_wh_matrix(members, centers[c])).sum()
            new_cost = (1 - iou_wh_matrix(members, candidate)).sum()
            if new_cost <= old_cost:
                new_centers[c] = candidate
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        dist = 1 - iou_wh_matrix(boxes, centers)
        new_assign = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(boxes)), new_assign].mean()))
        logger.debug(f"k-means 第 {iterations} 轮: 平均距离 {history[-1]:.6f}, 中心移动 {shift:.3e}")
        converged = np.array_equal(new_assign, assign) and shift == 0
        assign = new_assign
        if converged or shift < tol:
            break

    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    centers = centers[order]
    result = ClusterResult(
        centers=centers,
        groups=group_anchors(centers),
        mean_distance=history[-1],
        iterations=iterations,
        history=history,
    )
    logger.info(f"anchor 聚类完成: k={k}, 迭代 {iterations} 轮, 平均 1-IoU {result.mean_distance:.4f}")
    return result


def group_anchors(centers: np.ndarray, groups: int = 4) -> List[np.ndarray]:
    """按面积排好序的中心切成连续的若干组，k 不能整除时只成一组"""
    if len(centers) % groups:
        return [centers]
    return list(np.split(centers, groups))


def format_anchors(groups: Sequence[np.ndarray]) -> str:
    """每组一行，形如 "7,16, 10,9, 18,7" """
    lines = []
    for group in groups:
        lines.append(", ".join(f"{int(round(w))},{int(round(h))}" for w, h in group))
    return "\n".join(lines)


def anchors_to_config(groups: Sequence[np.ndarray]) -> List[List[List[float]]]:
    return [[[float(round(w)), float(round(h))] for w, h in group] for group in groups]
