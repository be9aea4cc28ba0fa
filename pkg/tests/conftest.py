import numpy as np
import pytest

from engine.module import BatchNorm2d
from engine.tensor import Tensor


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行标记为 slow 的测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def f64(rng):
    """生成 float64、requires_grad 的随机张量"""

    def make(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    return make


@pytest.fixture
def randomize_bn(rng):
    """把模块内所有 BN 的 γ、β 与滑动统计量随机化

    默认的 β=0、均值 0 会让全零邻域上的激活恰好落在 ReLU 折点上，梯度检查前先打散。
    """

    def apply(module):
        for _, sub in module.named_modules():
            if not isinstance(sub, BatchNorm2d):
                continue
            n = sub.channels
            sub.gamma.data[...] = rng.uniform(0.5, 1.5, n)
            sub.beta.data[...] = rng.normal(0.0, 0.5, n)
            sub._buffers["running_mean"][...] = rng.normal(0.0, 0.2, n)
            sub._buffers["running_var"][...] = rng.uniform(0.5, 1.5, n)
        return module

    return apply


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    for name in ("HSINET_CONFIG", "HSINET_THREADS", "HSINET_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("HSINET_OUTPUT_DIR", str(tmp_path / "runs"))
