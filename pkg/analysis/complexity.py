"""参数量与 FLOPs 统计

参数按模块逐个枚举：卷积 kh·kw·(Cin/groups)·Cout (+Cout 偏置)，BN 为 2C。
FLOPs 通过在全零输入上实际跑一遍前向、由各算子上报得到：卷积为 2·MACs，
逐元素算子每个输出元素 1 FLOP，池化每个输入元素 1 FLOP。
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from engine.module import BatchNorm2d, Conv2d, Module
from engine.profiler import Profiler
from engine.tensor import Tensor
from models.ghost import GhostModuleSpec, standard_conv_spec
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

FLOPS_CONVENTION = "FLOPs = 2 × MACs（乘加各计 1 次），逐元素算子 1 FLOP/元素"


@dataclass
class LayerStat:
    name: str
    params: int = 0
    flops: int = 0


@dataclass
class ComplexityReport:
    layers: List[LayerStat] = field(default_factory=list)
    total_params: int = 0
    total_flops: int = 0
    input_size: Optional[int] = None
    conv_flops: int = 0

    @property
    def size_mb(self) -> float:
        """float32 存储的参数体积"""
        return self.total_params * 4 / (1024 * 1024)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self) -> dict:
        return {
            "convention": FLOPS_CONVENTION,
            "input_size": self.input_size,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "conv_flops": self.conv_flops,
            "gflops": self.gflops,
            "size_mb": self.size_mb,
            "layers": [vars(layer) for layer in self.layers],
        }

    def format(self) -> str:
        lines = [f"# {FLOPS_CONVENTION}", f"{'层':<32}{'参数':>12}{'FLOPs':>16}"]
        for layer in self.layers:
            lines.append(f"{layer.name:<32}{layer.params:>12,}{layer.flops:>16,}")
        lines.append(
            f"{'合计':<32}{self.total_params:>12,}{self.total_flops:>16,}"
            f"  ({self.total_params / 1e6:.3f}M 参数, {self.gflops:.2f} GFLOPs, {self.size_mb:.2f} MB)"
        )
        return "\n".join(lines)


def _group(name: str, depth: int) -> str:
    parts = [p for p in name.split(".") if p]
    return ".".join(parts[:depth]) if parts else "(root)"


def module_params(module: Module) -> int:
    """模块自身（不含子模块）的可学习参数个数"""
    if isinstance(module, Conv2d):
        return module.spec.param_count()
    if isinstance(module, BatchNorm2d):
        return 2 * module.channels
    return sum(p.size for p in module._params.values())


def count_params(model: Module, depth: int = 2) -> ComplexityReport:
    per_layer: Dict[str, int] = OrderedDict()
    total = 0
    for name, module in model.named_modules():
        count = module_params(module)
        if not count:
            continue
        key = _group(name, depth)
        per_layer[key] = per_layer.get(key, 0) + count
        total += count
    return ComplexityReport(
        layers=[LayerStat(k, v) for k, v in per_layer.items()], total_params=total
    )


def count_flops(model: Module, input_size: int, in_channels: int = 3, depth: int = 2) -> ComplexityReport:
    """在 1×C×S×S 的全零输入上跑一次前向，汇总各算子上报的 FLOPs"""
    if input_size % 32:
        raise ConfigError(f"输入尺寸 {input_size} 必须能被 32 整除")
    x = Tensor(np.zeros((1, in_channels, input_size, input_size), dtype=model.dtype))
    with Profiler() as prof:
        model(x)
    per_layer: Dict[str, int] = OrderedDict()
    for record in prof.records:
        key = _group(record.scope, depth)
        per_layer[key] = per_layer.get(key, 0) + record.flops
    report = ComplexityReport(
        layers=[LayerStat(k, 0, v) for k, v in per_layer.items()],
        total_flops=prof.total_flops,
        input_size=input_size,
        conv_flops=sum(r.flops for r in prof.records if r.op == "conv2d"),
    )
    return report


def analyze(model: Module, input_size: int, depth: int = 2) -> ComplexityReport:
    params = count_params(model, depth)
    flops = count_flops(model, input_size, depth=depth)
    merged: Dict[str, LayerStat] = OrderedDict()
    for layer in params.layers + flops.layers:
        stat = merged.setdefault(layer.name, LayerStat(layer.name))
        stat.params += layer.params
        stat.flops += layer.flops
    report = ComplexityReport(
        layers=list(merged.values()),
        total_params=params.total_params,
        total_flops=flops.total_flops,
        input_size=input_size,
        conv_flops=flops.conv_flops,
    )
    logger.info(
        f"复杂度: {report.total_params:,} 参数, {report.gflops:.3f} GFLOPs @ {input_size}², "
        f"{report.size_mb:.2f} MB"
    )
    return report


# -------------------------------------------------------------------------------------------
# Ghost 模块的理论压缩比
# -------------------------------------------------------------------------------------------
class GhostRatios(NamedTuple):
    r_flops: Fraction
    r_params: Fraction
    approx: Fraction


def ghost_ratios(spec: GhostModuleSpec) -> GhostRatios:
    """Ghost 模块相对同尺寸普通卷积的 FLOPs/参数比

    r = (k²·C + s·d²) / ((1+s)·k²·C)，k=1 时即 (C + s·d²) / (C·(1+s))，C 很大时趋于 1/(1+s)。
    """
    k2 = spec.primary_kernel**2
    d2 = spec.cheap_kernel**2
    s, c = spec.ratio, spec.in_channels
    exact = Fraction(k2 * c + s * d2, (1 + s) * k2 * c)
    return GhostRatios(exact, exact, Fraction(1, 1 + s))


def measured_ghost_ratios(spec: GhostModuleSpec, h: int = 20, w: int = 20) -> GhostRatios:
    """按卷积规格枚举得到的比值（不含 BN 与激活）"""
    standard = standard_conv_spec(spec)
    ghost_params = spec.primary.param_count() + spec.cheap.param_count()
    ph, pw = spec.primary.output_hw(h, w)
    ghost_flops = spec.primary.flops(ph, pw) + spec.cheap.flops(ph, pw)
    sh, sw = standard.output_hw(h, w)
    return GhostRatios(
        Fraction(ghost_flops, standard.flops(sh, sw)),
        Fraction(ghost_params, standard.param_count()),
        Fraction(1, 1 + spec.ratio),
    )
