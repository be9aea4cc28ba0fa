"""中心差分梯度检查

损失取 sum(out · R)，R 为固定的随机投影；解析梯度由 backward 给出，数值梯度用步长 h 与 h/2 的
中心差分再做 Richardson 外推，截断误差为 O(h⁴)。必须在 float64 下运行，float32 的舍入误差会淹没比较结果。

ReLU 与最大池化在扰动跨过不可微点时差分失效。这类坐标用两个信号识别并跳过，另取坐标补足：
两种步长的中心差分不一致（折点离 x 较远），或二阶差分不按 h² 缩放（折点紧贴 x）。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from engine import functional as F
from engine.tensor import Graph, Tensor, backward
from utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class GradcheckReport:
    checked: int = 0
    skipped: int = 0
    total: int = 0
    max_rel_error: float = 0.0
    worst: Tuple[int, int] = (-1, -1)
    errors: List[float] = field(default_factory=list)

    @property
    def available(self) -> int:
        """可检查的坐标数（总坐标数减去不可微坐标）"""
        return self.total - self.skipped

    def passed(self, tol: float = 1e-6, min_checked: int = 100) -> bool:
        """误差低于 tol，且至少检查了 min_checked 个坐标（坐标总数不足时要求全部检查）"""
        required = max(1, min(min_checked, self.available))
        return self.checked >= required and self.max_rel_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def _projected_loss(fn, projections):
    outputs = fn()
    if isinstance(outputs, Tensor):
        outputs = (outputs,)
    total = None
    for out, proj in zip(outputs, projections):
        term = F.sum_(F.mul(out, Tensor(proj)))
        total = term if total is None else F.add(total, term)
    return total, outputs


def gradcheck(
    fn: Callable[[], object],
    tensors: Sequence[Tensor],
    *,
    num_coords: int = 100,
    step: float = 1e-4,
    seed: int = 0,
    tol: float = 1e-6,
) -> GradcheckReport:
    """检查 fn 对 tensors 的解析梯度

    Args:
        fn: 无参函数，返回一个或多个输出张量
        tensors: 被检查的参数/输入（requires_grad=True，float64）
        num_coords: 需要检查的坐标数，坐标总数不足时检查全部
        step: 差分步长 h
        seed: 投影矩阵与坐标抽样的随机种子
        tol: 通过阈值，同时决定不可微点的识别阈值

    Returns:
        GradcheckReport
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise ConfigError(f"梯度检查需要 float64，实际 {t.dtype}")
        if not t.requires_grad:
            raise ConfigError("梯度检查的张量必须 requires_grad=True")

    rng = np.random.default_rng(seed)
    first = fn()
    first = (first,) if isinstance(first, Tensor) else tuple(first)
    projections = [rng.standard_normal(out.shape) for out in first]

    with Graph() as graph:
        loss, _ = _projected_loss(fn, projections)
    grads = backward(graph, loss)

    def loss_value() -> float:
        value, _ = _projected_loss(fn, projections)
        return float(value.data)

    def shifted(data, flat, h) -> Tuple[float, float]:
        original = data.flat[flat]
        data.flat[flat] = original + h
        plus = loss_value()
        data.flat[flat] = original - h
        minus = loss_value()
        data.flat[flat] = original
        return plus, minus

    base = loss_value()
    kink_tol = tol / 10
    sizes = np.array([t.size for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradcheckReport(total=int(sizes.sum()))
    for coord in rng.permutation(report.total):
        if report.checked >= num_coords:
            break
        which = int(np.searchsorted(offsets, coord, side="right") - 1)
        flat = int(coord - offsets[which])
        tensor = tensors[which]
        analytic = grads.get(tensor)
        a = 0.0 if analytic is None else float(analytic.flat[flat])

        plus, minus = shifted(tensor.data, flat, step)
        half_plus, half_minus = shifted(tensor.data, flat, step / 2)
        coarse = (plus - minus) / (2 * step)
        fine = (half_plus - half_minus) / step
        numeric = (4 * fine - coarse) / 3

        # 光滑时二阶差分满足 S(h) = 4·S(h/2)，折点落在 [x-h, x+h] 内会破坏这一比例
        curvature = abs((plus - 2 * base + minus) - 4 * (half_plus - 2 * base + half_minus)) / step
        scale = max(1.0, abs(numeric))
        if abs(coarse - fine) > kink_tol * scale or curvature > kink_tol * scale:
            report.skipped += 1
            continue
        err = relative_error(a, numeric)
        report.errors.append(err)
        report.checked += 1
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = (which, flat)

    logger.debug(
        f"梯度检查: 检查 {report.checked} 个坐标, 跳过 {report.skipped} 个, "
        f"最大相对误差 {report.max_rel_error:.3e}"
    )
    return report
