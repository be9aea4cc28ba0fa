"""张量核心算子

所有算子对输入是纯函数，并同时提供反向（向量-雅可比积）。卷积采用 im2col + 单次矩阵乘，
深度卷积按卷积核偏移逐项累加，累加顺序与线程数无关。
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from engine import profiler
from engine.specs import Conv2dSpec, Shape
from engine.tensor import Tensor, record
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


# -------------------------------------------------------------------------------------------
# 基础工具
# -------------------------------------------------------------------------------------------
def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float32))


def _check_finite(op: str, *arrays) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise ShapeError(f"{op}: 输入包含非有限值 (NaN/Inf)")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: 形状不一致 {a.shape} vs {b.shape}")


def _strided(start: int, count: int, step: int) -> slice:
    return slice(start, start + (count - 1) * step + 1, step)


# -------------------------------------------------------------------------------------------
# 卷积
# -------------------------------------------------------------------------------------------
def _im2col(xp, kh, kw, sh, sw, ho, wo):
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, _strided(0, ho, sh), _strided(0, wo, sw)]
    n, c = xp.shape[:2]
    # (n, ho, wo, c, kh, kw) -> 行为输出位置，列为感受野
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _dense_forward(xp, wd, spec, ho, wo):
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    n = xp.shape[0]
    cout = wd.shape[0]
    if kh == 1 and kw == 1:
        xs = xp[:, :, _strided(0, ho, sh), _strided(0, wo, sw)]
        out = np.tensordot(wd[:, :, 0, 0], xs, axes=([1], [1]))
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    out = cols @ wd.reshape(cout, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def _dense_backward(xp, wd, g, spec, ho, wo):
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    n, c = xp.shape[:2]
    cout = wd.shape[0]
    gxp = np.zeros_like(xp)
    if kh == 1 and kw == 1:
        rows, cols_ = _strided(0, ho, sh), _strided(0, wo, sw)
        xs = xp[:, :, rows, cols_]
        gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3])).reshape(wd.shape)
        gxs = np.tensordot(wd[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gxp[:, :, rows, cols_] = gxs
        return gxp, gw
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (g2.T @ cols).reshape(wd.shape)
    dcols = (g2 @ wd.reshape(cout, -1)).reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, _strided(i, ho, sh), _strided(j, wo, sw)] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return gxp, gw


def _depthwise_forward(xp, wd, spec, ho, wo):
    # 每个输入通道独立卷积，输出通道 oc 对应输入通道 oc // multiplier
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    n, groups = xp.shape[:2]
    mult = spec.out_channels // groups
    w5 = wd.reshape(groups, mult, kh, kw)
    out = np.zeros((n, groups, mult, ho, wo), dtype=np.result_type(xp, wd))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, _strided(i, ho, sh), _strided(j, wo, sw)]
            out += patch[:, :, None] * w5[None, :, :, i, j, None, None]
    return out.reshape(n, groups * mult, ho, wo)


def _depthwise_backward(xp, wd, g, spec, ho, wo):
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    n, groups = xp.shape[:2]
    mult = spec.out_channels // groups
    w5 = wd.reshape(groups, mult, kh, kw)
    g5 = g.reshape(n, groups, mult, ho, wo)
    gw5 = np.zeros_like(w5)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            window = (slice(None), slice(None), _strided(i, ho, sh), _strided(j, wo, sw))
            patch = xp[window]
            gw5[:, :, i, j] = np.einsum("ngmhw,nghw->gm", g5, patch)
            gxp[window] += np.einsum("ngmhw,gm->nghw", g5, w5[:, :, i, j])
    return gxp, gw5.reshape(wd.shape)


def _grouped(fn, xp, wd, spec, ho, wo, g=None):
    """通用分组卷积：逐组调用稠密实现"""
    groups = spec.groups
    cin_g = spec.in_channels // groups
    cout_g = spec.out_channels // groups
    sub = Conv2dSpec(cin_g, cout_g, spec.kernel, spec.stride, spec.padding)
    parts = []
    for k in range(groups):
        xs = xp[:, k * cin_g : (k + 1) * cin_g]
        ws = wd[k * cout_g : (k + 1) * cout_g]
        if g is None:
            parts.append(fn(xs, ws, sub, ho, wo))
        else:
            parts.append(fn(xs, ws, g[:, k * cout_g : (k + 1) * cout_g], sub, ho, wo))
    if g is None:
        return np.concatenate(parts, axis=1)
    gxp = np.concatenate([p[0] for p in parts], axis=1)
    gw = np.concatenate([p[1] for p in parts], axis=0)
    return gxp, gw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, spec: Conv2dSpec = None) -> Tensor:
    """二维互相关，支持分组、步长与零填充

    groups == in_channels 时即为深度卷积（Ghost 模块的廉价操作）。
    """
    if spec is None:
        cout, cin, kh, kw = weight.shape
        spec = Conv2dSpec(cin, cout, (kh, kw), has_bias=bias is not None)
    shape = Shape.of(x.data)
    if shape.c != spec.in_channels:
        raise ShapeError(
            f"conv2d: 输入通道数 channels={shape.c} 与 in_channels={spec.in_channels} 不一致"
        )
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d: weight 形状 {weight.shape} 应为 {spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias 形状 {bias.shape} 应为 ({spec.out_channels},)")
    _check_finite("conv2d", x.data, weight.data)

    ho, wo = spec.output_hw(shape.h, shape.w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: 输入 height={shape.h}, width={shape.w} 小于卷积核")
    ph, pw = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    wd = weight.data

    if spec.groups == 1:
        forward, backward = _dense_forward, _dense_backward
    elif spec.is_depthwise:
        forward, backward = _depthwise_forward, _depthwise_backward
    else:
        forward = lambda *a: _grouped(_dense_forward, *a)  # noqa: E731
        backward = lambda xp_, wd_, g_, s_, h_, w_: _grouped(  # noqa: E731
            _dense_backward, xp_, wd_, s_, h_, w_, g=g_
        )

    out = forward(xp, wd, spec, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    profiler.note("conv2d", spec.flops(ho, wo), out.shape)

    def vjp(grads):
        g = grads[0]
        gxp, gw = backward(xp, wd, g, spec, ho, wo)
        gx = gxp[:, :, ph : ph + shape.h, pw : pw + shape.w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, vjp, spec)


def conv1d_same(x: Tensor, kernel: Tensor, axis: int = 1) -> Tensor:
    """沿 axis 的一维 same 卷积，两端各补 (k-1)/2 个零

    对 (n, C, 1, 1) 的通道描述子取 axis=1 即为通道注意力里的 C1D_k。
    """
    k = kernel.size
    if kernel.ndim != 1 or k % 2 == 0:
        raise ConfigError(f"conv1d_same: 卷积核长度必须为奇数，实际 {kernel.shape}")
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    length = moved.shape[-1]
    pad = (k - 1) // 2
    xp = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(pad, pad)])
    kd = kernel.data
    out = np.zeros(moved.shape, dtype=np.result_type(xp, kd))
    for i in range(k):
        out += kd[i] * xp[..., i : i + length]
    profiler.note("conv1d", 2 * k * out.size, out.shape)

    def vjp(grads):
        gm = np.moveaxis(grads[0], axis, -1)
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for i in range(k):
            gk[i] = np.sum(gm * xp[..., i : i + length])
            gxp[..., i : i + length] += kd[i] * gm
        return np.moveaxis(gxp[..., pad : pad + length], -1, axis), gk

    return record("conv1d_same", (x, kernel), np.moveaxis(out, -1, axis), vjp, k)


# -------------------------------------------------------------------------------------------
# 池化
# -------------------------------------------------------------------------------------------
def _check_mode(mode: str) -> None:
    if mode not in ("max", "avg"):
        raise ConfigError(f"池化模式必须为 max 或 avg，实际 {mode!r}")


def pool_spatial(x: Tensor, mode: str) -> Tensor:
    """对每个通道的 h×w 平面取最大值/均值，输出 (n, c, 1, 1)"""
    _check_mode(mode)
    n, c, h, w = Shape.of(x.data)
    flat = x.data.reshape(n, c, h * w)
    profiler.note(f"pool_spatial_{mode}", x.size, (n, c, 1, 1))
    if mode == "avg":
        out = flat.mean(axis=2).reshape(n, c, 1, 1)

        def vjp(grads):
            g = grads[0] / (h * w)
            return (np.broadcast_to(g, x.shape).copy(),)

    else:
        # argmax 取首个最大值，即线性下标最小者
        idx = np.argmax(flat, axis=2)[..., None]
        out = np.take_along_axis(flat, idx, axis=2).reshape(n, c, 1, 1)

        def vjp(grads):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx, grads[0].reshape(n, c, 1), axis=2)
            return (gx.reshape(x.shape),)

    return record(f"pool_spatial_{mode}", (x,), out, vjp)


def pool_channel(x: Tensor, mode: str) -> Tensor:
    """沿通道轴取最大值/均值，输出 (n, 1, h, w)"""
    _check_mode(mode)
    n, c, h, w = Shape.of(x.data)
    profiler.note(f"pool_channel_{mode}", x.size, (n, 1, h, w))
    if mode == "avg":
        out = x.data.mean(axis=1, keepdims=True)

        def vjp(grads):
            return (np.broadcast_to(grads[0] / c, x.shape).copy(),)

    else:
        idx = np.argmax(x.data, axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)

        def vjp(grads):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, grads[0], axis=1)
            return (gx,)

    return record(f"pool_channel_{mode}", (x,), out, vjp)


# -------------------------------------------------------------------------------------------
# 逐元素激活
# -------------------------------------------------------------------------------------------
def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    profiler.note("relu", out.size, out.shape)
    return record("relu", (x,), out, lambda g: (g[0] * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    profiler.note("sigmoid", out.size, out.shape)
    return record("sigmoid", (x,), out, lambda g: (g[0] * out * (1 - out),))


def hswish(x: Tensor) -> Tensor:
    a = x.data
    out = a * np.clip(a + 3, 0, 6) / 6
    profiler.note("hswish", out.size, out.shape)

    def vjp(grads):
        d = np.where(a < -3, 0.0, np.where(a > 3, 1.0, (2 * a + 3) / 6)).astype(a.dtype)
        return (grads[0] * d,)

    return record("hswish", (x,), out, vjp)


def activation(x: Tensor, kind: Optional[str]) -> Tensor:
    if kind is None or kind == "none":
        return x
    table = {"relu": relu, "sigmoid": sigmoid, "hswish": hswish}
    if kind not in table:
        raise ConfigError(f"未知激活函数 {kind!r}")
    return table[kind](x)


# -------------------------------------------------------------------------------------------
# 逐点二元运算
# -------------------------------------------------------------------------------------------
def _binary(op, a, b, forward, grad_a, grad_b):
    a = as_tensor(a, getattr(b, "dtype", None))
    b = as_tensor(b, a.dtype)
    out = forward(a.data, b.data)
    profiler.note(op, out.size, out.shape)

    def vjp(grads):
        g = grads[0]
        return (
            _unbroadcast(grad_a(g, a.data, b.data, out), a.shape),
            _unbroadcast(grad_b(g, a.data, b.data, out), b.shape),
        )

    return record(op, (a, b), out, vjp)


def add_(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub_(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul_(a, b) -> Tensor:
    return _binary(
        "mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x
    )


def div_(a, b) -> Tensor:
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
    )


def maximum(a, b) -> Tensor:
    # 相等时梯度归第一个参数
    return _binary(
        "maximum",
        a,
        b,
        np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
    )


def minimum(a, b) -> Tensor:
    return _binary(
        "minimum",
        a,
        b,
        np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    """形状严格一致的逐点加法"""
    _same_shape("add", a, b)
    return add_(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """形状严格一致的逐点乘法"""
    _same_shape("mul", a, b)
    return mul_(a, b)


def gate(x: Tensor, g: Tensor) -> Tensor:
    """注意力门控：g 为 (n,c,1,1) 或 (n,1,h,w)，沿单例维广播后与 x 相乘"""
    xs, gs = Shape.of(x.data), Shape.of(g.data)
    for name, xv, gv in zip(Shape._fields, xs, gs):
        if gv != xv and gv != 1:
            raise ShapeError(f"gate: 维度 {name} 不可广播 ({gv} -> {xv})")
    return mul_(x, g)


def neg(x: Tensor) -> Tensor:
    out = -x.data
    return record("neg", (x,), out, lambda g: (-g[0],))


def atan(x: Tensor) -> Tensor:
    out = np.arctan(x.data)
    profiler.note("atan", out.size, out.shape)
    return record("atan", (x,), out, lambda g: (g[0] / (1 + x.data * x.data),))


def clamp_min(x: Tensor, low: float) -> Tensor:
    out = np.maximum(x.data, low)
    return record("clamp_min", (x,), out, lambda g: (g[0] * (x.data > low),))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """逐元素二分类交叉熵（数值稳定形式），targets 不求导"""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, logits.dtype)
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    profiler.note("bce", out.size, out.shape)
    return record("bce_with_logits", (logits,), out, lambda g: (g[0] * (_sigmoid(z) - t),))


# -------------------------------------------------------------------------------------------
# 规约与形状变换
# -------------------------------------------------------------------------------------------
def sum_(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record("sum", (x,), out, lambda g: (np.full_like(x.data, g[0]),))


def mean(x: Tensor) -> Tensor:
    count = max(x.size, 1)
    out = np.asarray(x.data.sum() / count, dtype=x.dtype)
    return record("mean", (x,), out, lambda g: (np.full_like(x.data, g[0] / count),))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record("reshape", (x,), out, lambda g: (g[0].reshape(x.shape),), tuple(shape))


def index(x: Tensor, key) -> Tensor:
    """基本切片与高级索引，反向对重复下标累加"""
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    def vjp(grads):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, grads[0])
        return (gx,)

    return record("index", (x,), np.array(out, copy=True), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: 输入列表为空")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def vjp(grads):
        return tuple(np.split(grads[0], bounds, axis=axis))

    return record("concat", tensors, out, vjp, tuple(sizes))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: 输入列表为空")
    ref = Shape.of(tensors[0].data)
    for t in tensors[1:]:
        s = Shape.of(t.data)
        if (s.n, s.h, s.w) != (ref.n, ref.h, ref.w):
            raise ShapeError(f"concat_channels: 形状 {t.shape} 与 {tensors[0].shape} 不可拼接")
    return concat(tensors, axis=1)


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    shape = Shape.of(x.data)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != shape.c:
        raise ShapeError(f"split_channels: 分段 {sizes} 之和必须等于通道数 {shape.c}")
    bounds = np.cumsum(sizes)[:-1]
    parts = tuple(np.ascontiguousarray(p) for p in np.split(x.data, bounds, axis=1))

    def vjp(grads):
        return (np.concatenate(grads, axis=1),)

    return list(record("split_channels", (x,), parts, vjp, tuple(sizes)))


def upsample_nearest_2x(x: Tensor) -> Tensor:
    n, c, h, w = Shape.of(x.data)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(grads):
        return (grads[0].reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest_2x", (x,), out, vjp)


# -------------------------------------------------------------------------------------------
# 批归一化
# -------------------------------------------------------------------------------------------
def batch_norm(x: Tensor, params, training: bool = False) -> Tensor:
    """逐通道批归一化

    training=True 时使用当前批次统计量并更新 params 的滑动均值/方差（无偏方差），
    否则使用滑动统计量，此时为逐通道仿射变换。
    """
    n, c, h, w = Shape.of(x.data)
    if params.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: 通道数 {c} 与参数长度 {params.gamma.shape[0]} 不一致")
    a = x.data
    gamma = params.gamma.data.reshape(1, c, 1, 1)
    beta = params.beta.data.reshape(1, c, 1, 1)
    profiler.note("batch_norm", a.size, a.shape)

    if training:
        count = n * h * w
        mu = a.mean(axis=(0, 2, 3), keepdims=True)
        var = a.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + params.eps)
        xhat = (a - mu) * inv_std
        unbiased = var.reshape(c) * count / max(count - 1, 1)
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * mu.reshape(c)
        params.running_var[...] = (1 - m) * params.running_var + m * unbiased

        def vjp(grads):
            g = grads[0]
            g_sum = g.sum(axis=(0, 2, 3), keepdims=True)
            gx_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = gamma * inv_std / count * (count * g - g_sum - xhat * gx_sum)
            return gx, gx_sum.reshape(c), g_sum.reshape(c)

    else:
        inv_std = 1.0 / np.sqrt(params.running_var.reshape(1, c, 1, 1) + params.eps)
        xhat = (a - params.running_mean.reshape(1, c, 1, 1)) * inv_std

        def vjp(grads):
            g = grads[0]
            return (
                g * gamma * inv_std,
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    out = (xhat * gamma + beta).astype(a.dtype, copy=False)
    return record("batch_norm", (x, params.gamma, params.beta), out, vjp)


def pointwise(x, kind: str, other=None):
    """逐点算子的统一入口，便于按名称组合"""
    if kind in ("relu", "sigmoid", "hswish"):
        return activation(x, kind)
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    if kind == "bn":
        return batch_norm(x, other)
    if kind == "upsample_nearest_2x":
        return upsample_nearest_2x(x)
    if kind == "concat_channels":
        return concat_channels(x)
    if kind == "split_channels":
        return split_channels(x, other)
    raise ConfigError(f"未知逐点算子 {kind!r}")
