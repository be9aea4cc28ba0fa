"""cluster-anchors: 按 1-IoU 聚类标注框得到 anchor"""

import logging
from pathlib import Path

from analysis.anchors import kmeans_1iou
from commands.common import resolve_config
from utils.annotations import read_box_sizes
from utils.errors import DataError

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("cluster-anchors", help="聚类生成 anchor")
    parser.add_argument("--config", help="JSON 配置文件，默认取 HSINET_CONFIG")
    parser.add_argument("--input", required=True, help="标注 CSV 或 Kaggle 分割 CSV")
    parser.add_argument("--k", type=int, default=12, help="聚类数")
    parser.add_argument("--size", type=int, help="框换算到该输入尺寸下的像素")
    parser.add_argument("--seed", type=int, help="随机种子")
    parser.add_argument("--max-iter", type=int, default=300)
    parser.add_argument("--output", help="把 anchor 文本写入文件")
    parser.set_defaults(handler=run)


def run(args, settings) -> int:
    config = resolve_config(args, settings)
    source = Path(args.input)
    if not source.is_file():
        raise DataError(f"标注文件不存在: {source}")
    boxes = read_box_sizes(source, config.input_size)
    result = kmeans_1iou(boxes, k=args.k, seed=config.seed, max_iter=args.max_iter)
    text = result.format()
    print(text)
    print(f"# 平均 1-IoU {result.mean_distance:.6f}, 迭代 {result.iterations} 轮, {len(boxes)} 个框")
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
        logger.info(f"anchor 已写入 {args.output}")
    return 0
