"""eval: 在标注集上计算 Precision / Recall / mAP@0.5"""

import logging
from pathlib import Path

import numpy as np

from analysis.metrics import evaluate
from commands.common import add_model_args, load_model, resolve_config
from models.postprocess import Detection, decode, nms
from models.trainer import EVAL_CANDIDATE_CONF
from utils.annotations import group_by_image, read_annotations, read_detections, resolve_image
from utils.errors import DataError
from utils.image_io import image_size, load_image

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="评估检测精度")
    add_model_args(parser)
    parser.add_argument("--input", required=True, help="标注 CSV（真值）")
    parser.add_argument("--detections", help="已有的检测 CSV；不给则用 --weights 推理")
    parser.add_argument("--weights", help="HSIW 权重文件")
    parser.add_argument("--match-iou", type=float, default=0.5, help="判定 TP 的 IoU 阈值")
    parser.add_argument("--output", help="把报告写成 JSON")
    parser.set_defaults(handler=run)


def _source_truths(csv_path: Path, name: str, gts: np.ndarray) -> np.ndarray:
    """归一化真值 → 源图像素"""
    width, height = image_size(resolve_image(csv_path, name))
    boxes = gts.copy()
    boxes[:, [1, 3]] *= width
    boxes[:, [2, 4]] *= height
    return boxes


def _rows_to_detections(rows: np.ndarray):
    detections = []
    for cls, score, x1, y1, x2, y2 in rows:
        detections.append(
            Detection((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, float(score), int(cls), float(score))
        )
    return detections


def run(args, settings) -> int:
    config = resolve_config(args, settings)
    csv_path = Path(args.input)
    truths = group_by_image(read_annotations(csv_path))
    if not truths:
        raise DataError(f"标注文件为空: {csv_path}")
    ground = [_source_truths(csv_path, name, gts) for name, gts in truths.items()]

    if args.detections:
        found = read_detections(args.detections)
        keys = {str(resolve_image(csv_path, name)): name for name in truths}
        by_name = {keys.get(k, k): v for k, v in found.items()}
        predictions = [_rows_to_detections(by_name.get(name, np.zeros((0, 6)))) for name in truths]
    else:
        model = load_model(config, args.weights)
        predictions = []
        for name in truths:
            tensor, transform = load_image(resolve_image(csv_path, name), config.input_size)
            heads = model(tensor)
            candidates = decode(heads, config.level_anchors, config.strides, EVAL_CANDIDATE_CONF, config.ncls)[0]
            kept = nms(candidates, config.iou_threshold, config.max_det)
            boxes = transform.to_source([d.xyxy for d in kept]) if kept else np.zeros((0, 4))
            rows = np.array(
                [[d.class_id, d.score, *box] for d, box in zip(kept, boxes)], dtype=np.float64
            ).reshape(-1, 6)
            predictions.append(_rows_to_detections(rows))

    report = evaluate(
        predictions,
        ground,
        ncls=config.ncls,
        conf_threshold=config.conf_threshold,
        iou_thresh=args.match_iou,
        threads=settings.get("THREADS", 0),
    )
    print(report.format())
    if args.output:
        Path(args.output).write_text(report.to_json(), encoding="utf-8")
    return 0
