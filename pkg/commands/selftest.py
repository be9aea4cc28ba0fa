"""selftest: 不依赖 pytest 的快速自检"""

import logging
from fractions import Fraction

import numpy as np

from analysis.anchors import kmeans_1iou
from analysis.complexity import ghost_ratios, measured_ghost_ratios
from analysis.metrics import evaluate
from commands.common import print_config
from engine.gradcheck import gradcheck
from engine.module import BatchNorm2d
from engine.tensor import Tensor
from models.attention import psi_kernel_size
from models.backbone import BackboneSpec
from models.config import ModelConfig
from models.ghost import GhostModule, GhostModuleSpec
from models.hsi_former import GnConv, GnConvSpec
from models.postprocess import Detection, cxcywh_to_xyxy, box_iou, nms
from utils.errors import HsiNetError
from utils.weights_io import dump_weights, parse_weights

logger = logging.getLogger(__name__)

TAP_SHAPES_640 = [(24, 160, 160), (40, 80, 80), (80, 40, 40), (160, 20, 20)]


def register(subparsers) -> None:
    parser = subparsers.add_parser("selftest", help="运行内置自检")
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(handler=run)


# -------------------------------------------------------------------------------------------
# 各项检查，返回 None 表示通过，否则返回失败原因
# -------------------------------------------------------------------------------------------
def check_ghost_ratios(rng):
    for c in (16, 32, 64, 128, 256):
        for s in (1, 2, 3):
            spec = GhostModuleSpec(c, c * (1 + s), ratio=s)
            exact = Fraction(c + s * 9, c * (1 + s))
            measured = measured_ghost_ratios(spec)
            if measured.r_flops != exact or measured.r_params != exact or ghost_ratios(spec).r_flops != exact:
                return f"C={c} s={s}: {measured} != {exact}"


def check_shape_walk(rng):
    spec = BackboneSpec()
    walk = spec.shape_walk(640)
    taps = [walk[i + 1] for i in spec.tap_rows().values()]
    if taps != TAP_SHAPES_640:
        return f"taps {taps}"


def check_psi(rng):
    expected = {2: 1, 16: 3, 40: 3, 112: 3, 160: 5, 960: 5}
    got = {c: psi_kernel_size(c) for c in expected}
    if got != expected:
        return f"{got}"


def check_schedule(rng):
    for c in (16, 64, 160, 256):
        for n in (1, 2, 3, 4):
            if sum(GnConvSpec(c, order=n).split_sizes) != 2 * c:
                return f"C={c} n={n}"


def _gradcheck_module(module, x, rng):
    module.to(np.float64).eval()
    # β=0 时全零邻域的激活恰好落在 ReLU 折点上
    for _, sub in module.named_modules():
        if isinstance(sub, BatchNorm2d):
            sub.beta.data[...] = rng.normal(0.0, 0.5, sub.channels)
    x = Tensor(x.astype(np.float64), requires_grad=True)
    report = gradcheck(lambda: module(x), [x] + module.parameters())
    if not report.passed():
        return f"最大相对误差 {report.max_rel_error:.2e}"


def check_gradients(rng):
    ghost = GhostModule(GhostModuleSpec(4, 8), rng)
    failed = _gradcheck_module(ghost, rng.standard_normal((1, 4, 5, 5)), rng)
    if failed:
        return f"ghost: {failed}"
    gnconv = GnConv(GnConvSpec(8, order=3), rng)
    failed = _gradcheck_module(gnconv, rng.standard_normal((1, 8, 4, 4)), rng)
    if failed:
        return f"gnconv: {failed}"


def _brute_force_nms(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, *dets[i].box))
    kept = []
    for i in order:
        if all(box_iou(cxcywh_to_xyxy([dets[i].box]), cxcywh_to_xyxy([dets[k].box]))[0, 0] < thr for k in kept):
            kept.append(i)
    return {dets[i] for i in kept}


def check_nms(rng):
    for _ in range(20):
        boxes = rng.uniform(0, 100, size=(30, 2))
        sizes = rng.uniform(5, 30, size=(30, 2))
        scores = rng.uniform(size=30)
        dets = [Detection(*b, *s, float(p), 0, float(p)) for b, s, p in zip(boxes, sizes, scores)]
        if set(nms(dets, 0.45, 1000)) != _brute_force_nms(dets, 0.45):
            return "与暴力实现不一致"


def check_metrics(rng):
    gts = [np.array([[0, 10, 10, 4, 4], [0, 50, 50, 4, 4]], dtype=np.float64)]
    one = [[Detection(10, 10, 4, 4, 0.9, 0, 0.9)]]
    report = evaluate(one, gts, conf_threshold=0.0)
    if abs(report.map - 0.5) > 1e-12:
        return f"一检二真值 AP {report.map}"
    both = [[Detection(10, 10, 4, 4, 0.9, 0, 0.9), Detection(50, 50, 4, 4, 0.8, 0, 0.8)]]
    if evaluate(both, gts, conf_threshold=0.0).map != 1.0:
        return "完美检测 AP 不为 1"


def check_anchors(rng):
    boxes = np.concatenate([rng.normal((10, 12), 0.3, (50, 2)), rng.normal((40, 30), 0.3, (50, 2))])
    result = kmeans_1iou(boxes, k=2, seed=int(rng.integers(1 << 16)))
    if np.any(np.diff(result.history) > 1e-12):
        return "平均距离出现上升"
    if np.abs(result.centers - [[10, 12], [40, 30]]).max() > 1:
        return f"中心 {result.centers.tolist()}"


def check_weights(rng):
    state = {"a.weight": rng.standard_normal((2, 3)).astype(np.float32), "a.bias": np.zeros(2, np.float32)}
    data = dump_weights(state)
    if dump_weights(parse_weights(data)) != data:
        return "往返后字节不一致"
    for i in range(12):
        corrupt = bytearray(data)
        corrupt[i] ^= 0xFF
        try:
            parse_weights(bytes(corrupt))
        except HsiNetError:
            continue
        return f"第 {i} 字节损坏未被发现"


CHECKS = [
    ("ghost 压缩比", check_ghost_ratios),
    ("主干形状", check_shape_walk),
    ("ψ 核大小", check_psi),
    ("g^nConv 通道", check_schedule),
    ("梯度", check_gradients),
    ("NMS", check_nms),
    ("指标", check_metrics),
    ("anchor 聚类", check_anchors),
    ("权重容器", check_weights),
]


def run(args, settings) -> int:
    print_config(ModelConfig(seed=args.seed))
    rng = np.random.default_rng(args.seed)
    failures = 0
    for name, check in CHECKS:
        try:
            reason = check(rng)
        except Exception as e:
            logger.error(f"自检 {name} 异常: {e}", exc_info=True)
            reason = f"异常 {e}"
        status = "PASS" if reason is None else f"FAIL ({reason})"
        print(f"{name:<16}{status}")
        failures += reason is not None
    if failures:
        raise SelftestFailed(f"{failures} 项自检失败")
    return 0


class SelftestFailed(HsiNetError):
    pass
