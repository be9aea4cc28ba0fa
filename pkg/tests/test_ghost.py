import numpy as np
import pytest

from analysis.complexity import count_params
from engine.gradcheck import gradcheck
from engine.tensor import Tensor
from models.ghost import Gbneck, GbneckSpec, GhostModule, GhostModuleSpec, standard_conv_spec
from utils.errors import ConfigError, ShapeError


def test_ghost_module_conv_params():
    spec = GhostModuleSpec(16, 32)
    assert spec.intrinsic == 16
    assert spec.primary.param_count() == 256
    assert spec.cheap.param_count() == 144
    assert standard_conv_spec(spec).param_count() == 512
    # 卷积 400 + 两个 BN 各 2×16
    assert count_params(GhostModule(spec, np.random.default_rng(0))).total_params == 400 + 64


@pytest.mark.parametrize("ratio, out_channels", [(1, 32), (2, 10), (3, 24)])
def test_ghost_module_output_channels(rng, ratio, out_channels):
    module = GhostModule(GhostModuleSpec(8, out_channels, ratio=ratio), rng)
    module.eval()
    out = module(Tensor(rng.standard_normal((2, 8, 6, 6)).astype(np.float32)))
    assert out.shape == (2, out_channels, 6, 6)


def test_ghost_module_zero_input_gives_zero_output(rng):
    module = GhostModule(GhostModuleSpec(8, 16), rng)
    module.eval()
    out = module(Tensor(np.zeros((1, 8, 5, 5), np.float32)))
    assert not out.data.any()


def test_ghost_module_rejects_bad_specs():
    with pytest.raises(ConfigError):
        GhostModuleSpec(8, 15)
    with pytest.raises(ConfigError):
        GhostModuleSpec(8, 16, cheap_kernel=2)
    with pytest.raises(ConfigError):
        GhostModuleSpec(0, 16)


def test_ghost_module_rejects_channel_mismatch(rng):
    module = GhostModule(GhostModuleSpec(8, 16), rng)
    with pytest.raises(ShapeError):
        module(Tensor(np.zeros((1, 4, 5, 5), np.float32)))


def test_gbneck_with_zeroed_main_path_is_identity(rng):
    block = Gbneck(GbneckSpec(16, 48, 16, use_lhab=True), rng)
    block.eval()
    for bn in (block.ghost2.primary_conv.bn, block.ghost2.cheap_operation.bn):
        bn.gamma.data[:] = 0
    x = rng.standard_normal((1, 16, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


@pytest.mark.parametrize("lhab", [False, True])
def test_gbneck_stride_two_halves_resolution(rng, lhab):
    block = Gbneck(GbneckSpec(16, 48, 24, stride=2, use_lhab=lhab), rng)
    block.eval()
    out = block(Tensor(rng.standard_normal((2, 16, 8, 8)).astype(np.float32)))
    assert out.shape == (2, 24, 4, 4)
    assert not block.spec.has_identity_shortcut


def test_gbneck_rejects_bad_stride():
    with pytest.raises(ConfigError):
        GbneckSpec(16, 48, 16, stride=3)


def test_ghost_module_gradients(f64, randomize_bn):
    module = GhostModule(GhostModuleSpec(4, 8), np.random.default_rng(1)).to(np.float64)
    randomize_bn(module).eval()
    x = f64(1, 4, 5, 5)
    report = gradcheck(lambda: module(x), [x, *module.parameters()])
    assert report.passed(), report.max_rel_error


@pytest.mark.parametrize("lhab", [False, True])
@pytest.mark.parametrize(
    "spec_args",
    [
        (6, 12, 6, 1),  # 恒等捷径
        (4, 12, 6, 1),  # 1×1 卷积捷径
        (4, 8, 6, 2),
    ],
)
def test_gbneck_gradients(f64, randomize_bn, spec_args, lhab):
    c_in, c_mid, c_out, stride = spec_args
    spec = GbneckSpec(c_in, c_mid, c_out, stride=stride, use_lhab=lhab)
    block = Gbneck(spec, np.random.default_rng(2)).to(np.float64)
    randomize_bn(block).eval()
    x = f64(1, c_in, 6, 6)
    params = block.parameters()
    report = gradcheck(lambda: block(x), [x, *params])
    assert report.passed(), report.max_rel_error
