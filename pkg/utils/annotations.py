"""
标注读写
  标注 CSV:   path,class,cx,cy,w,h   （坐标归一化到 [0,1]）
  检测 CSV:   path,class,score,x1,y1,x2,y2   （源图像素）
  Kaggle CSV: ImageId,EncodedPixels   （每行一艘船的游程编码，空值表示无船）
"""

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import AnnotationError, DataError

logger = logging.getLogger(__name__)

ANNOTATION_HEADER = ["path", "class", "cx", "cy", "w", "h"]
DETECTION_HEADER = ["path", "class", "score", "x1", "y1", "x2", "y2"]
KAGGLE_HEADER = ["ImageId", "EncodedPixels"]
KAGGLE_IMAGE_SIZE = 768


@dataclass(frozen=True)
class AnnotationRecord:
    path: str
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    def validate(self, line: Optional[int] = None) -> "AnnotationRecord":
        if self.class_id < 0:
            raise AnnotationError(f"类别编号不能为负: {self.class_id}", line)
        for name, value in zip(("cx", "cy", "w", "h"), self.box):
            if not 0.0 <= value <= 1.0:
                raise AnnotationError(f"{name}={value} 超出 [0,1]", line)
        if self.w <= 0 or self.h <= 0:
            raise AnnotationError(f"宽高必须为正: w={self.w}, h={self.h}", line)
        return self


def _is_header(row: Sequence[str], header: Sequence[str]) -> bool:
    return [c.strip() for c in row] == header


def read_annotations(path: Union[str, Path]) -> List[AnnotationRecord]:
    """读取标注 CSV，首行表头可省略；任何一行出错都带行号报错"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"标注文件不存在: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as f:
        for line, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line == 1 and _is_header(row, ANNOTATION_HEADER):
                continue
            if len(row) != len(ANNOTATION_HEADER):
                raise AnnotationError(f"需要 {len(ANNOTATION_HEADER)} 列，实际 {len(row)} 列", line)
            try:
                record = AnnotationRecord(
                    path=row[0].strip(),
                    class_id=int(row[1]),
                    cx=float(row[2]),
                    cy=float(row[3]),
                    w=float(row[4]),
                    h=float(row[5]),
                )
            except ValueError as e:
                raise AnnotationError(f"数值解析失败: {e}", line) from e
            records.append(record.validate(line))
    logger.info(f"读取标注 {path}: {len(records)} 条")
    return records


def write_annotations(records: Iterable[AnnotationRecord], path: Union[str, Path]) -> int:
    """写出标注 CSV，浮点数用 repr 保证读回后完全一致"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for record in records:
            writer.writerow(
                [record.path, record.class_id] + [repr(float(v)) for v in record.box]
            )
            count += 1
    return count


def group_by_image(records: Iterable[AnnotationRecord]) -> "OrderedDict[str, np.ndarray]":
    """按图片聚合为 (G, 5) [class, cx, cy, w, h] 数组（归一化坐标），保持首次出现的顺序"""
    grouped: Dict[str, list] = OrderedDict()
    for record in records:
        grouped.setdefault(record.path, []).append([record.class_id, *record.box])
    return OrderedDict((k, np.asarray(v, dtype=np.float64).reshape(-1, 5)) for k, v in grouped.items())


def resolve_image(csv_path: Union[str, Path], image_path: str) -> Path:
    """相对路径以标注文件所在目录为基准"""
    image = Path(image_path)
    return image if image.is_absolute() else Path(csv_path).parent / image


# -------------------------------------------------------------------------------------------
# 游程编码 → 外接框
# -------------------------------------------------------------------------------------------
class RleBox(NamedTuple):
    """像素包含式边界"""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def normalized(self, h: int, w: int) -> Tuple[float, float, float, float]:
        """(cx, cy, w, h) / 图像尺寸"""
        return (
            (self.x_min + self.x_max + 1) / 2 / w,
            (self.y_min + self.y_max + 1) / 2 / h,
            self.width / w,
            self.height / h,
        )


def rle_to_bbox(rle: str, h: int, w: int) -> Optional[RleBox]:
    """
    Args:
        rle: "start length start length ..."，start 从 1 开始，按列优先（先向下再向右）
        h, w: 图像高宽

    Returns:
        覆盖全部像素的最小外接框；空串返回 None
    """
    tokens = rle.split()
    if not tokens:
        return None
    if len(tokens) % 2:
        raise DataError(f"游程编码长度必须为偶数，实际 {len(tokens)}")
    try:
        runs = np.asarray([int(t) for t in tokens], dtype=np.int64).reshape(-1, 2)
    except ValueError as e:
        raise DataError(f"游程编码含非整数: {e}") from e
    starts, lengths = runs[:, 0] - 1, runs[:, 1]
    if np.any(starts < 0) or np.any(lengths < 1):
        raise DataError("游程起点必须 >= 1 且长度必须 >= 1")
    ends = starts + lengths - 1
    if np.any(ends >= h * w):
        raise DataError(f"游程超出图像范围 {h}x{w}")

    col0, row0 = np.divmod(starts, h)
    col1, row1 = np.divmod(ends, h)
    crosses = col1 > col0
    y_min = int(np.where(crosses, 0, row0).min())
    y_max = int(np.where(crosses, h - 1, row1).max())
    return RleBox(int(col0.min()), y_min, int(col1.max()), y_max)


def read_kaggle_csv(
    path: Union[str, Path], image_size: int = KAGGLE_IMAGE_SIZE, class_id: int = 0
) -> Tuple[List[AnnotationRecord], List[str]]:
    """读取 Kaggle 船只分割 CSV

    Returns:
        (标注记录, 所有出现过的 ImageId)；无船图片只出现在第二项中
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"标注文件不存在: {path}")
    records, image_ids = [], []
    seen = set()
    with path.open(newline="", encoding="utf-8") as f:
        for line, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if line == 1 and _is_header(row, KAGGLE_HEADER):
                continue
            if len(row) != 2:
                raise AnnotationError(f"需要 2 列，实际 {len(row)} 列", line)
            image_id, encoded = row[0].strip(), row[1]
            if image_id not in seen:
                seen.add(image_id)
                image_ids.append(image_id)
            try:
                box = rle_to_bbox(encoded, image_size, image_size)
            except DataError as e:
                raise AnnotationError(str(e), line) from e
            if box is None:
                continue
            cx, cy, bw, bh = box.normalized(image_size, image_size)
            records.append(AnnotationRecord(image_id, class_id, cx, cy, bw, bh).validate(line))
    logger.info(f"读取 Kaggle 标注 {path}: {len(image_ids)} 张图, {len(records)} 艘船")
    return records, image_ids


def read_box_sizes(path: Union[str, Path], image_size: int) -> np.ndarray:
    """从任一标注格式读出所有框的 (w, h)，单位为 image_size 输入下的像素"""
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        first = f.readline().strip()
    if first.split(",")[0].strip() == KAGGLE_HEADER[0]:
        records, _ = read_kaggle_csv(path)
    else:
        records = read_annotations(path)
    if not records:
        return np.zeros((0, 2))
    return np.asarray([[r.w, r.h] for r in records], dtype=np.float64) * image_size


# -------------------------------------------------------------------------------------------
# 检测结果输出
# -------------------------------------------------------------------------------------------
def write_detections(rows: Iterable[Sequence], path: Union[str, Path]) -> int:
    """rows: (path, class, score, x1, y1, x2, y2)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(DETECTION_HEADER)
        for image, cls, score, x1, y1, x2, y2 in rows:
            writer.writerow([image, int(cls), f"{score:.6f}", f"{x1:.2f}", f"{y1:.2f}", f"{x2:.2f}", f"{y2:.2f}"])
            count += 1
    logger.info(f"检测结果已写入 {path}: {count} 行")
    return count


def read_detections(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    """读回检测 CSV，按图片聚合为 (K, 6) [class, score, x1, y1, x2, y2]"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"检测结果文件不存在: {path}")
    grouped: Dict[str, list] = OrderedDict()
    with path.open(newline="", encoding="utf-8") as f:
        for line, row in enumerate(csv.reader(f), start=1):
            if not row or (line == 1 and _is_header(row, DETECTION_HEADER)):
                continue
            if len(row) != len(DETECTION_HEADER):
                raise AnnotationError(f"需要 {len(DETECTION_HEADER)} 列，实际 {len(row)} 列", line)
            try:
                grouped.setdefault(row[0].strip(), []).append([float(v) for v in row[1:]])
            except ValueError as e:
                raise AnnotationError(f"数值解析失败: {e}", line) from e
    return OrderedDict((k, np.asarray(v, dtype=np.float64).reshape(-1, 6)) for k, v in grouped.items())
