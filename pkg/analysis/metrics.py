"""检测指标：Precision、Recall 与 mAP

AP 为全点插值：每个召回率处的精度替换为不低于该召回率的最大精度，再按矩形求和。
匹配 IoU 阈值默认 0.5。
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from models.postprocess import Detection, box_iou, cxcywh_to_xyxy

logger = logging.getLogger(__name__)


@dataclass
class EvalCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalReport:
    precision: float = 0.0
    recall: float = 0.0
    ap: Dict[int, float] = field(default_factory=dict)
    map: float = 0.0
    pr_curve: List[Tuple[float, float]] = field(default_factory=list)
    counts: EvalCounts = field(default_factory=EvalCounts)
    iou_threshold: float = 0.5
    conf_threshold: float = 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["ap"] = {str(k): v for k, v in self.ap.items()}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    def format(self) -> str:
        lines = [
            f"IoU 阈值 {self.iou_threshold}, 置信度阈值 {self.conf_threshold}",
            f"Precision {self.precision:.4f}  Recall {self.recall:.4f}  mAP@0.5 {self.map:.4f}",
            f"TP {self.counts.tp}  FP {self.counts.fp}  FN {self.counts.fn}",
        ]
        for cls, ap in sorted(self.ap.items()):
            lines.append(f"  类别 {cls}: AP {ap:.4f}")
        return "\n".join(lines)


def match(dets: Sequence[Detection], gts: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """逐个检测框（已按分数降序）与尚未匹配的真值中 IoU 最大者匹配

    Args:
        dets: 检测结果
        gts: (G, 4) 真值框 (cx, cy, w, h)

    Returns:
        与 dets 等长的布尔数组，True 为 TP
    """
    flags = np.zeros(len(dets), dtype=bool)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(dets) == 0 or len(gts) == 0:
        return flags
    ious = box_iou(cxcywh_to_xyxy([d.box for d in dets]), cxcywh_to_xyxy(gts))
    used = np.zeros(len(gts), dtype=bool)
    for i in range(len(dets)):
        candidates = np.where(used, -1.0, ious[i])
        best = int(candidates.argmax())
        if candidates[best] >= iou_thresh:
            flags[i] = True
            used[best] = True
    return flags


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def pr_and_ap(flags, scores, total_gt: int) -> EvalReport:
    """按分数降序累计 P/R 并计算 AP"""
    flags = np.asarray(flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    report = EvalReport()
    if len(flags) == 0 or total_gt <= 0:
        report.counts = EvalCounts(int(flags.sum()), int((~flags).sum()), max(total_gt, 0))
        report.precision = float(tp[-1] / len(flags)) if len(flags) else 0.0
        report.ap = {0: 0.0}
        return report
    precision = tp / (tp + fp)
    recall = tp / total_gt
    report.pr_curve = list(zip(recall.tolist(), precision.tolist()))
    report.precision = float(precision[-1])
    report.recall = float(recall[-1])
    report.counts = EvalCounts(int(tp[-1]), int(fp[-1]), int(total_gt - tp[-1]))
    report.ap = {0: voc_ap(recall, precision)}
    report.map = report.ap[0]
    return report


def _match_image(args):
    dets, gts, ncls, iou_thresh = args
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    per_class = {}
    for cls in range(ncls):
        cls_dets = sorted(
            (d for d in dets if d.class_id == cls), key=lambda d: (-d.score, d.cx, d.cy, d.w, d.h)
        )
        cls_gts = gts[gts[:, 0] == cls, 1:]
        flags = match(cls_dets, cls_gts, iou_thresh)
        per_class[cls] = ([d.score for d in cls_dets], flags, len(cls_gts))
    return per_class


def evaluate(
    predictions: Sequence[Sequence[Detection]],
    ground_truths: Sequence[np.ndarray],
    ncls: int = 1,
    conf_threshold: float = 0.25,
    iou_thresh: float = 0.5,
    threads: int = 0,
) -> EvalReport:
    """逐图逐类匹配后汇总

    Args:
        predictions: 每张图的检测列表（应包含低于置信度阈值的框，用于 PR 曲线）
        ground_truths: 每张图 (G, 5) [class, cx, cy, w, h]
        threads: >0 时按图并行匹配，合并顺序固定

    Returns:
        EvalReport，Precision/Recall 取 score ≥ conf_threshold 的检测
    """
    jobs = [(d, g, ncls, iou_thresh) for d, g in zip(predictions, ground_truths)]
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            matched = list(pool.map(_match_image, jobs))
    else:
        matched = [_match_image(job) for job in jobs]

    report = EvalReport(iou_threshold=iou_thresh, conf_threshold=conf_threshold)
    all_scores, all_flags, all_gt = [], [], 0
    for cls in range(ncls):
        scores = np.concatenate([np.asarray(m[cls][0], dtype=np.float64) for m in matched]) if matched else np.zeros(0)
        flags = np.concatenate([m[cls][1] for m in matched]) if matched else np.zeros(0, dtype=bool)
        total = sum(m[cls][2] for m in matched)
        if total == 0 and len(flags) == 0:
            continue
        part = pr_and_ap(flags, scores, total)
        report.ap[cls] = part.ap.get(0, 0.0)
        if ncls == 1:
            report.pr_curve = part.pr_curve
        all_scores.append(scores)
        all_flags.append(flags)
        all_gt += total

    report.map = float(np.mean(list(report.ap.values()))) if report.ap else 0.0
    if all_flags:
        scores = np.concatenate(all_scores)
        flags = np.concatenate(all_flags)
        kept = flags[scores >= conf_threshold]
        tp = int(kept.sum())
        fp = int(len(kept) - tp)
        report.counts = EvalCounts(tp, fp, all_gt - tp)
        report.precision = tp / (tp + fp) if tp + fp else 0.0
        report.recall = tp / all_gt if all_gt else 0.0
    logger.info(f"评估完成: P {report.precision:.4f}, R {report.recall:.4f}, mAP {report.map:.4f}")
    return report
