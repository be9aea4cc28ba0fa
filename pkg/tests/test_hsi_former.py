import numpy as np
import pytest

from engine.gradcheck import gradcheck
from engine.tensor import Tensor
from models.hsi_former import GnConv, GnConvSpec, HsiFormer, HsiFormerLayer, HsiFormerSpec, channel_schedule
from utils.errors import ConfigError, ShapeError


def test_channel_schedule():
    assert channel_schedule(64, 3) == [16, 32, 64]
    assert GnConvSpec(64, 3).split_sizes == [16, 16, 32, 64]
    assert channel_schedule(8, 2) == [4, 8]
    assert GnConvSpec(8, 2).split_sizes == [4, 4, 8]
    assert channel_schedule(160, 1) == [160]


@pytest.mark.parametrize("channels", [40, 80, 160, 960])
@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_split_sizes_cover_projection(channels, order):
    assert sum(GnConvSpec(channels, order).split_sizes) == 2 * channels


def test_channel_schedule_rejects_indivisible():
    with pytest.raises(ConfigError):
        channel_schedule(6, 3)
    with pytest.raises(ConfigError):
        channel_schedule(8, 0)
    with pytest.raises(ConfigError):
        HsiFormerSpec(16, layers=0)


def _depthwise_same(x, w):
    """x: (c,h,w), w: (c,k,k)"""
    c, h, wd = x.shape
    k = w.shape[-1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            out += w[:, u, v][:, None, None] * xp[:, u : u + h, v : v + wd]
    return out


def test_gnconv_matches_unrolled_recursion(rng):
    """三阶递推逐步展开：a1 = a0·g0, a2 = W1 a1·g1, a3 = W2 a2·g2"""
    module = GnConv(GnConvSpec(8, 3), rng).to(np.float64)
    x = rng.standard_normal((1, 8, 4, 4))

    w_in = module.proj_in.weight.data[:, :, 0, 0]
    p = np.einsum("oc,chw->ohw", w_in, x[0])
    a0, b = p[:2], p[2:]
    g = _depthwise_same(b, module.dw_conv.weight.data[:, 0])
    g0, g1, g2 = g[:2], g[2:6], g[6:]
    a1 = a0 * g0
    a2 = np.einsum("oc,chw->ohw", module.pw_convs[1].weight.data[:, :, 0, 0], a1) * g1
    a3 = np.einsum("oc,chw->ohw", module.pw_convs[2].weight.data[:, :, 0, 0], a2) * g2
    expected = np.einsum("oc,chw->ohw", module.proj_out.weight.data[:, :, 0, 0], a3)

    out = module(Tensor(x)).data[0]
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_gnconv_first_order_is_single_gate(rng):
    module = GnConv(GnConvSpec(4, 1), rng).to(np.float64)
    assert len(module.pw_convs) == 1
    out = module(Tensor(rng.standard_normal((2, 4, 5, 5))))
    assert out.shape == (2, 4, 5, 5)


def test_layer_with_zeroed_branches_is_identity(rng):
    layer = HsiFormerLayer(HsiFormerSpec(16, order=3), rng)
    layer.eval()
    layer.gnconv.proj_out.weight.data[:] = 0
    layer.mlp.fc2.weight.data[:] = 0
    layer.mlp.fc2.bias.data[:] = 0
    x = rng.standard_normal((1, 16, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_hsi_former_preserves_shape(rng):
    block = HsiFormer(HsiFormerSpec(40, layers=2, order=3), rng)
    block.eval()
    assert len(block) == 2
    out = block(Tensor(rng.standard_normal((1, 40, 2, 2)).astype(np.float32)))
    assert out.shape == (1, 40, 2, 2)
    with pytest.raises(ShapeError):
        block(Tensor(np.zeros((1, 32, 2, 2), np.float32)))


@pytest.mark.parametrize("order", [1, 2, 3])
def test_gnconv_gradients(f64, order):
    gnconv = GnConv(GnConvSpec(8, order), np.random.default_rng(order)).to(np.float64)
    x = f64(1, 8, 4, 4)
    report = gradcheck(lambda: gnconv(x), [x, *gnconv.parameters()])
    assert report.passed(), report.max_rel_error


def test_hsi_former_gradients(f64, randomize_bn):
    block = HsiFormer(HsiFormerSpec(8, layers=2, order=2), np.random.default_rng(4)).to(np.float64)
    randomize_bn(block).eval()
    x = f64(1, 8, 4, 4)
    report = gradcheck(lambda: block(x), [x, *block.parameters()])
    assert report.passed(), report.max_rel_error
