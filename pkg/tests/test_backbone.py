import numpy as np
import pytest

from engine.tensor import Tensor
from models.backbone import BACKBONE_ROWS, Backbone, BackboneSpec
from utils.errors import ConfigError, ShapeError

# (通道, 边长) @ 640
WALK_640 = [
    (16, 320),
    (16, 320),
    (24, 160),
    (24, 160),
    (40, 80),
    (40, 80),
    (80, 40),
    (80, 40),
    (80, 40),
    (80, 40),
    (112, 40),
    (112, 40),
    (160, 20),
    (160, 20),
    (160, 20),
    (160, 20),
    (160, 20),
]


def test_shape_walk_at_640():
    walk = BackboneSpec().shape_walk()
    assert len(walk) == len(BACKBONE_ROWS) == 17
    assert [(c, h) for c, h, _ in walk] == WALK_640
    assert all(h == w for _, h, w in walk)


def test_taps_at_640_and_320():
    spec = BackboneSpec()
    walk = spec.shape_walk()
    taps = [walk[i + 1][:2] for i in spec.tap_rows().values()]
    assert taps == [(24, 160), (40, 80), (80, 40), (160, 20)]
    walk = spec.shape_walk(320)
    assert [walk[i + 1][1] for i in spec.tap_rows().values()] == [80, 40, 20, 10]


def test_lhab_rows():
    assert sum(row.lhab for row in BACKBONE_ROWS) == 7
    specs = BackboneSpec().gbneck_specs()
    assert [s.exp_channels for s in specs if s.use_lhab] == [72, 120, 480, 672, 672, 960, 960]


def test_width_multiplier_scales_channels():
    spec = BackboneSpec(width_multiplier=0.25)
    assert spec.width(16) == 4
    assert spec.tap_channels == (8, 12, 20, 40)
    assert BackboneSpec().tap_channels == (24, 40, 80, 160)


def test_forward_taps_small_width(rng):
    spec = BackboneSpec(width_multiplier=0.25, input_size=64)
    backbone = Backbone(spec, rng)
    backbone.eval()
    taps = backbone(Tensor(rng.uniform(size=(1, 3, 64, 64)).astype(np.float32)))
    assert [t.shape for t in taps] == [(1, 8, 16, 16), (1, 12, 8, 8), (1, 20, 4, 4), (1, 40, 2, 2)]
    assert backbone.hsi is not None


def test_forward_rows_match_shape_walk(rng):
    spec = BackboneSpec(width_multiplier=0.25, input_size=64, use_hsi=False)
    backbone = Backbone(spec, rng)
    backbone.eval()
    x = Tensor(np.zeros((1, 3, 64, 64), np.float32))
    shapes = [y.shape[1:] for _, y in backbone.forward_rows(x)]
    assert shapes == spec.shape_walk()


def test_backbone_rejects_bad_inputs(rng):
    backbone = Backbone(BackboneSpec(width_multiplier=0.25, input_size=64, use_hsi=False), rng)
    with pytest.raises(ShapeError):
        backbone(Tensor(np.zeros((1, 3, 48, 48), np.float32)))
    with pytest.raises(ShapeError):
        backbone(Tensor(np.zeros((1, 1, 64, 64), np.float32)))
    with pytest.raises(ConfigError):
        BackboneSpec(input_size=100)
    with pytest.raises(ConfigError):
        BackboneSpec(attention="cbam")
