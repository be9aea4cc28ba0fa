"""infer: 对图片推理，输出检测 CSV（源图像素坐标）"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List

from commands.common import add_model_args, load_model, output_dir, resolve_config
from utils.annotations import write_detections
from utils.errors import ImageFormatError
from utils.image_io import allowed_file, load_image, save_annotated

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("infer", help="检测图片中的船只")
    add_model_args(parser)
    parser.add_argument("--weights", help="HSIW 权重文件")
    parser.add_argument("--input", required=True, help="图片文件或目录")
    parser.add_argument("--output", help="输出目录，默认 HSINET_OUTPUT_DIR/infer")
    parser.add_argument("--save-images", action="store_true", help="同时保存画框后的图片")
    parser.set_defaults(handler=run)


def collect_images(source: Path) -> List[Path]:
    if source.is_dir():
        images = sorted(
            p for p in source.iterdir() if p.is_file() and allowed_file(p)
        )
        if not images:
            raise ImageFormatError(f"目录中没有 PNG/PPM 图片: {source}")
        return images
    if not source.is_file():
        raise ImageFormatError(f"输入不存在: {source}")
    return [source]


def run(args, settings) -> int:
    config = resolve_config(args, settings)
    images = collect_images(Path(args.input))
    # 先全部读入，任何一张失败都不产生输出
    loaded = [load_image(path, config.input_size) for path in images]
    model = load_model(config, args.weights)

    def predict(item):
        tensor, _ = item
        return model.detect(tensor)[0]

    threads = settings.get("THREADS", 0)
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(predict, loaded))
    else:
        results = [predict(item) for item in loaded]

    out = output_dir(args, settings, "infer")
    rows = []
    for path, (_, transform), detections in zip(images, loaded, results):
        boxes = transform.to_source([d.xyxy for d in detections]) if detections else []
        for det, box in zip(detections, boxes):
            rows.append((str(path), det.class_id, det.score, *box))
        logger.info(f"{path.name}: {len(detections)} 个目标")
        if args.save_images:
            labels = [f"{d.class_id}:{d.score:.2f}" for d in detections]
            save_annotated(path, boxes, labels, out / "images")
    csv_path = out / "detections.csv"
    write_detections(rows, csv_path)
    print(f"{len(images)} 张图片, {len(rows)} 个检测结果 -> {csv_path}")
    return 0
