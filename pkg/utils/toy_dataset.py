"""合成的小规模船只数据集：暗色噪声背景上的亮色矩形"""

import logging
from pathlib import Path
from typing import List, NamedTuple, Tuple, Union

import numpy as np

from utils.annotations import AnnotationRecord, write_annotations
from utils.errors import ConfigError
from utils.image_io import save_image

logger = logging.getLogger(__name__)

MIN_SIDE, MAX_SIDE = 4, 20
MAX_SHIPS = 3
BACKGROUND_MAX = 40
SHIP_RANGE = (200, 256)
GAP = 2  # 矩形之间至少间隔的像素


class ToySample(NamedTuple):
    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (K, 4) 像素 [x0, y0, x1, y1)，右下开区间


def _overlaps(box: Tuple[int, int, int, int], placed: List[Tuple[int, int, int, int]]) -> bool:
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in placed:
        if x0 < a1 + GAP and a0 < x1 + GAP and y0 < b1 + GAP and b0 < y1 + GAP:
            return True
    return False


def generate_toy_samples(count: int, image_size: int, seed: int = 0) -> List[ToySample]:
    """同一 seed 生成逐位相同的样本"""
    if image_size <= 0 or image_size % 32:
        raise ConfigError(f"图片尺寸 {image_size} 必须为 32 的正整数倍")
    if count < 1:
        raise ConfigError(f"样本数必须 >= 1，实际 {count}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        image = rng.integers(0, BACKGROUND_MAX, size=(image_size, image_size, 3), dtype=np.uint8)
        wanted = int(rng.integers(1, MAX_SHIPS + 1))
        placed: List[Tuple[int, int, int, int]] = []
        attempts = 0
        while len(placed) < wanted and attempts < 100:
            attempts += 1
            w, h = (int(v) for v in rng.integers(MIN_SIDE, MAX_SIDE + 1, size=2))
            x0 = int(rng.integers(0, image_size - w + 1))
            y0 = int(rng.integers(0, image_size - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if _overlaps(box, placed):
                continue
            placed.append(box)
            image[y0 : y0 + h, x0 : x0 + w] = rng.integers(*SHIP_RANGE, size=(h, w, 3), dtype=np.uint8)
        samples.append(ToySample(image, np.asarray(placed, dtype=np.int64).reshape(-1, 4)))
    return samples


def sample_records(name: str, boxes: np.ndarray, image_size: int) -> List[AnnotationRecord]:
    records = []
    for x0, y0, x1, y1 in boxes:
        records.append(
            AnnotationRecord(
                path=name,
                class_id=0,
                cx=(x0 + x1) / 2 / image_size,
                cy=(y0 + y1) / 2 / image_size,
                w=(x1 - x0) / image_size,
                h=(y1 - y0) / image_size,
            )
        )
    return records


def make_toy_dataset(
    out_dir: Union[str, Path], count: int = 16, image_size: int = 160, seed: int = 0
) -> Tuple[Path, List[AnnotationRecord]]:
    """生成 PNG 图片与 annotations.csv

    Returns:
        (标注文件路径, 标注记录)
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records: List[AnnotationRecord] = []
    for index, sample in enumerate(generate_toy_samples(count, image_size, seed)):
        name = f"images/toy_{index:04d}.png"
        save_image(sample.image, out_dir / name)
        records.extend(sample_records(name, sample.boxes, image_size))
    csv_path = out_dir / "annotations.csv"
    write_annotations(records, csv_path)
    logger.info(f"合成数据集已生成: {out_dir} ({count} 张图, {len(records)} 个目标, seed={seed})")
    return csv_path, records
