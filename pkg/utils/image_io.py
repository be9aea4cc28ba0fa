"""
图片读取与预处理工具模块
提供图片读取、格式校验、letterbox 缩放以及检测框绘制的统一接口。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from engine.tensor import Tensor
from utils.errors import ConfigError, ImageFormatError

logger = logging.getLogger(__name__)

# 默认配置
DEFAULT_ALLOWED_EXTENSIONS = {"png", "ppm"}
DEFAULT_TARGET_SIZE = 640
PAD_VALUE = 114  # letterbox 填充灰度（8 位）
BOX_COLOR = (255, 64, 64)


def allowed_file(filename: Union[str, Path], allowed_extensions: set = None) -> bool:
    """按扩展名判断是否为可读入的图片（PNG / 二进制 PPM）

    Args:
        filename: 文件名或路径
        allowed_extensions: 小写、不带点的扩展名集合

    Returns:
        bool: 扩展名是否在允许范围内
    """
    suffix = Path(filename).suffix.lower().lstrip(".")
    return bool(suffix) and suffix in (allowed_extensions or DEFAULT_ALLOWED_EXTENSIONS)


@dataclass(frozen=True)
class LetterboxTransform:
    """源图像素坐标与模型输入坐标之间的仿射变换"""

    scale: float
    pad_x: int
    pad_y: int
    src_w: int
    src_h: int
    target: int

    def to_model(self, boxes_xyxy) -> np.ndarray:
        boxes = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4).copy()
        boxes[:, [0, 2]] = boxes[:, [0, 2]] * self.scale + self.pad_x
        boxes[:, [1, 3]] = boxes[:, [1, 3]] * self.scale + self.pad_y
        return boxes

    def to_source(self, boxes_xyxy, clip: bool = True) -> np.ndarray:
        boxes = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4).copy()
        boxes[:, [0, 2]] = (boxes[:, [0, 2]] - self.pad_x) / self.scale
        boxes[:, [1, 3]] = (boxes[:, [1, 3]] - self.pad_y) / self.scale
        if clip:
            boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, self.src_w)
            boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, self.src_h)
        return boxes


def letterbox_geometry(src_w: int, src_h: int, target: int) -> LetterboxTransform:
    """等比例缩放到 target 以内，余下部分两侧均分填充（奇数时多出的 1 像素放在右/下）"""
    if src_w <= 0 or src_h <= 0:
        raise ImageFormatError(f"图片尺寸非法: {src_w}x{src_h}")
    if target <= 0 or target % 32:
        raise ConfigError(f"目标尺寸 {target} 必须为 32 的正整数倍")
    scale = min(target / src_w, target / src_h)
    new_w = min(target, max(1, int(round(src_w * scale))))
    new_h = min(target, max(1, int(round(src_h * scale))))
    return LetterboxTransform(
        scale=scale,
        pad_x=(target - new_w) // 2,
        pad_y=(target - new_h) // 2,
        src_w=src_w,
        src_h=src_h,
        target=target,
    )


def open_image(path: Union[str, Path]) -> Image.Image:
    """读取 8 位 PNG 或二进制 PPM (P6)，统一转成 RGB"""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"图片不存在: {path}")
    if not allowed_file(path.name):
        raise ImageFormatError(
            f"不支持的图片格式，仅支持: {', '.join(sorted(DEFAULT_ALLOWED_EXTENSIONS))}"
        )
    try:
        image = Image.open(path)
        image.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageFormatError(f"无法读取图片 {path}: {e}") from e

    if image.format == "PPM":
        if image.mode != "RGB":
            raise ImageFormatError(f"PPM 仅支持 8 位 P6，实际模式 {image.mode}: {path}")
    elif image.format == "PNG":
        if image.mode not in ("RGB", "RGBA", "L", "LA", "P"):
            raise ImageFormatError(f"PNG 仅支持 8 位通道，实际模式 {image.mode}: {path}")
        if image.mode != "RGB":
            image = image.convert("RGB")
    else:
        raise ImageFormatError(f"文件内容不是 PNG/PPM: {path} ({image.format})")
    return image


def image_size(path: Union[str, Path]) -> Tuple[int, int]:
    """只读文件头得到 (宽, 高)"""
    try:
        with Image.open(path) as image:
            return image.size
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ImageFormatError(f"无法读取图片 {path}: {e}") from e


def letterbox(image: Image.Image, target: int = DEFAULT_TARGET_SIZE) -> Tuple[np.ndarray, LetterboxTransform]:
    """返回 (3, target, target) 的 float32 数组（[0,1]）以及变换记录"""
    transform = letterbox_geometry(image.width, image.height, target)
    new_w = min(target, max(1, int(round(image.width * transform.scale))))
    new_h = min(target, max(1, int(round(image.height * transform.scale))))
    if (new_w, new_h) != image.size:
        logger.debug(f"缩放图片: {image.width}x{image.height} -> {new_w}x{new_h}")
        image = image.resize((new_w, new_h), Image.Resampling.BILINEAR)
    canvas = Image.new("RGB", (target, target), (PAD_VALUE,) * 3)
    canvas.paste(image, (transform.pad_x, transform.pad_y))
    array = np.asarray(canvas, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return np.ascontiguousarray(array), transform


def load_image(path: Union[str, Path], target_size: int = DEFAULT_TARGET_SIZE) -> Tuple[Tensor, LetterboxTransform]:
    """读取图片并做 letterbox，返回 (1, 3, S, S) 张量"""
    array, transform = letterbox(open_image(path), target_size)
    logger.debug(
        f"读取图片 {path}: 源 {transform.src_w}x{transform.src_h}, 缩放 {transform.scale:.4f}, "
        f"填充 ({transform.pad_x}, {transform.pad_y})"
    )
    return Tensor(array[None]), transform


def save_image(array: np.ndarray, path: Union[str, Path]) -> None:
    """保存 (H, W, 3) uint8 数组为 PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def draw_boxes(
    image: Image.Image,
    boxes_xyxy: Iterable,
    labels: Iterable[str] = (),
    color: Tuple[int, int, int] = BOX_COLOR,
) -> Image.Image:
    """在图片副本上画检测框（源图像素坐标）"""
    annotated = image.copy()
    draw = ImageDraw.Draw(annotated)
    labels = list(labels)
    for i, (x1, y1, x2, y2) in enumerate(np.asarray(list(boxes_xyxy), dtype=np.float64).reshape(-1, 4)):
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        if i < len(labels):
            draw.text((x1 + 2, max(0.0, y1 - 12)), labels[i], fill=color)
    return annotated


def save_annotated(source: Union[str, Path], boxes_xyxy, labels, out_dir: Union[str, Path]) -> Path:
    """读取原图、画框并以 PNG 保存到 out_dir，返回保存路径"""
    source = Path(source)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_path = out_dir / f"{source.stem}_det.png"
    try:
        draw_boxes(open_image(source), boxes_xyxy, labels).save(save_path, format="PNG")
    except OSError as e:
        logger.error(f"保存标注图片失败: {save_path}, {e}", exc_info=True)
        raise ImageFormatError(f"保存标注图片失败: {save_path}") from e
    logger.info(f"标注图片已保存: {save_path}")
    return save_path
