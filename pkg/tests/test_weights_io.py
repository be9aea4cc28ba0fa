import struct
from collections import OrderedDict

import numpy as np
import pytest

from models.config import ModelConfig
from models.detector import build_model
from utils.errors import (
    BadMagicError,
    HsiNetError,
    TensorMismatchError,
    TruncatedError,
    UnknownTensorError,
    UnsupportedVersionError,
    WeightFormatError,
)
from utils.weights_io import dump_weights, load_weights, parse_weights, read_weights, save_weights


def state(**arrays):
    return OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in arrays.items())


def test_empty_container_is_header_only():
    data = dump_weights(OrderedDict())
    assert data == b"HSIW" + struct.pack("<II", 1, 0)
    assert len(data) == 12
    assert parse_weights(data) == OrderedDict()


def test_single_tensor_layout():
    data = dump_weights(state(w=[[1, 2], [3, 4]]))
    # 名称长度 2 + 名称 1 + 类型/维数 2 + 形状 8 + 数据 16
    assert len(data) == 12 + 2 + 1 + 2 + 8 + 16
    assert data[-16:] == np.array([1, 2, 3, 4], dtype="<f4").tobytes()
    parsed = parse_weights(data)
    np.testing.assert_array_equal(parsed["w"], [[1, 2], [3, 4]])


def test_model_round_trip_is_byte_identical(tmp_path):
    source = build_model(ModelConfig(width_multiplier=0.25, input_size=64, seed=0))
    path = tmp_path / "model.hsiw"
    size = save_weights(source, path)
    assert size == path.stat().st_size

    target = build_model(ModelConfig(width_multiplier=0.25, input_size=64, seed=1))
    assert dump_weights(target) != path.read_bytes()
    read_weights(path, target)
    assert dump_weights(target) == path.read_bytes()


def test_header_corruption_is_detected():
    good = dump_weights(state(a=[1.0, 2.0], b=[[3.0]]))
    expected = state(a=[0, 0], b=[[0]])
    for offset in range(12):
        corrupt = bytearray(good)
        corrupt[offset] ^= 0xFF
        with pytest.raises(WeightFormatError):
            parse_weights(bytes(corrupt), expected)


def test_specific_format_errors():
    good = dump_weights(state(a=[1.0, 2.0]))
    with pytest.raises(BadMagicError):
        parse_weights(b"HSI")
    with pytest.raises(BadMagicError):
        parse_weights(b"XXXX" + good[4:])
    with pytest.raises(UnsupportedVersionError):
        parse_weights(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(TruncatedError):
        parse_weights(good[:-1])
    with pytest.raises(WeightFormatError) as info:
        parse_weights(good + b"\x00")
    assert type(info.value) is WeightFormatError
    bad_dtype = bytearray(good)
    bad_dtype[12 + 2 + 1] = 7
    with pytest.raises(TensorMismatchError):
        parse_weights(bytes(bad_dtype))


def test_name_and_shape_checks_against_model():
    expected = state(a=[0, 0], b=[0])
    with pytest.raises(TensorMismatchError):
        parse_weights(dump_weights(state(a=[1, 2])), expected)
    with pytest.raises(UnknownTensorError):
        parse_weights(dump_weights(state(a=[1, 2], b=[1], c=[1])), expected)
    with pytest.raises(UnknownTensorError):
        parse_weights(dump_weights(state(a=[1, 2], c=[1])), expected)
    with pytest.raises(TensorMismatchError):
        parse_weights(dump_weights(state(a=[1, 2, 3], b=[1])), expected)


def test_duplicate_names_are_rejected():
    one = dump_weights(state(a=[1.0]))
    body = one[12:]
    data = b"HSIW" + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(TensorMismatchError):
        parse_weights(data)


def test_load_failure_leaves_model_untouched():
    model = build_model(ModelConfig(width_multiplier=0.25, input_size=64))
    before = dump_weights(model)
    data = bytearray(before)
    data[-1:] = b""
    with pytest.raises(HsiNetError):
        load_weights(bytes(data), model)
    assert dump_weights(model) == before


def test_missing_file(tmp_path):
    model = build_model(ModelConfig(width_multiplier=0.25, input_size=64))
    with pytest.raises(WeightFormatError):
        read_weights(tmp_path / "absent.hsiw", model)
