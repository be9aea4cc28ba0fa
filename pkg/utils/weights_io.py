"""HSIW 权重容器

布局（全部小端）:
    magic "HSIW" | version u32 | count u32
    每个张量: name_len u16 | name (UTF-8) | dtype u8 (0=f32) | rank u8 | dims u32×rank | 数据
"""

import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

from utils.errors import (
    BadMagicError,
    TensorMismatchError,
    TruncatedError,
    UnknownTensorError,
    UnsupportedVersionError,
    WeightFormatError,
)

logger = logging.getLogger(__name__)

MAGIC = b"HSIW"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


def _state_of(source) -> Mapping[str, np.ndarray]:
    return source.state_dict() if hasattr(source, "state_dict") else source


def dump_weights(source) -> bytes:
    """把模型（或 state dict）序列化为字节串"""
    state = _state_of(source)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise TensorMismatchError(f"张量名过长: {name[:32]}...")
        array = np.asarray(array)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", 0, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(source, path: Union[str, Path]) -> int:
    data = dump_weights(source)
    Path(path).write_bytes(data)
    logger.info(f"权重已保存: {path} ({len(data)} 字节)")
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, size: int, what: str) -> memoryview:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedError(
                f"读取{what}时数据不足: 偏移 {self.offset} 需要 {size} 字节，剩余 {len(self.data) - self.offset}"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_weights(data: bytes, expected: Optional[Mapping[str, np.ndarray]] = None) -> "OrderedDict[str, np.ndarray]":
    """解析容器；给出 expected 时边解析边校验名称、形状

    Returns:
        名称 → float32 数组，顺序与文件一致
    """
    reader = _Reader(data)
    if len(data) < len(MAGIC) or bytes(reader.take(len(MAGIC), "magic")) != MAGIC:
        raise BadMagicError("文件头不是 HSIW")
    (version,) = reader.unpack("<I", "版本号")
    if version != VERSION:
        raise UnsupportedVersionError(f"不支持的容器版本 {version}，当前仅支持 {VERSION}")
    (count,) = reader.unpack("<I", "张量数量")
    if expected is not None and count != len(expected):
        if count > len(expected):
            raise UnknownTensorError(f"文件含 {count} 个张量，模型只有 {len(expected)} 个")
        raise TensorMismatchError(f"文件含 {count} 个张量，模型需要 {len(expected)} 个")

    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"第 {index} 个张量名长度")
        raw_name = reader.take(name_len, f"第 {index} 个张量名")
        try:
            name = bytes(raw_name).decode("utf-8")
        except UnicodeDecodeError as e:
            raise UnknownTensorError(f"第 {index} 个张量名不是合法 UTF-8") from e
        if name in state:
            raise TensorMismatchError(f"张量名重复: {name}")
        if expected is not None and name not in expected:
            raise UnknownTensorError(f"模型中不存在张量: {name}")
        code, rank = reader.unpack("<BB", f"张量 {name} 的类型与维数")
        if code not in DTYPE_CODES:
            raise TensorMismatchError(f"张量 {name} 的数据类型代码 {code} 不受支持")
        dims = reader.unpack(f"<{rank}I", f"张量 {name} 的形状")
        if expected is not None and tuple(dims) != tuple(np.shape(expected[name])):
            raise TensorMismatchError(
                f"张量 {name} 形状不一致: 文件 {tuple(dims)}, 模型 {tuple(np.shape(expected[name]))}"
            )
        dtype = DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(size, f"张量 {name} 的数据")
        state[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)

    if reader.offset != len(data):
        raise WeightFormatError(f"容器末尾有 {len(data) - reader.offset} 个多余字节")
    return state


def load_weights(data: bytes, model) -> Dict[str, np.ndarray]:
    """校验并把容器中的权重写入模型"""
    state = parse_weights(data, model.state_dict())
    model.load_state_dict(state)
    logger.debug(f"已加载 {len(state)} 个张量")
    return state


def read_weights(path: Union[str, Path], model) -> Dict[str, np.ndarray]:
    file = Path(path)
    if not file.is_file():
        raise TruncatedError(f"权重文件不存在: {path}")
    return load_weights(file.read_bytes(), model)
