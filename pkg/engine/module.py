"""模块系统：参数注册、状态字典与常用层

子模块和参数通过属性赋值自动注册，调用模块时按属性名压入 profiler 作用域，
所以 FLOP 记录可以按层级名汇总。
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from engine import functional as F
from engine import profiler
from engine.specs import Conv2dSpec
from engine.tensor import Tensor
from utils.errors import TensorMismatchError, UnknownTensorError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


def parameter(array, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_scope_name", "")
        object.__setattr__(self, "training", False)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            object.__setattr__(value, "_scope_name", name)
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = np.asarray(array)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        with profiler.scope(self._scope_name):
            return self.forward(*args, **kwargs)

    # ---------------------------------------------------------------------------------------
    # 遍历
    # ---------------------------------------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for path, module in self.named_modules(prefix):
            for name, param in module._params.items():
                yield (f"{path}.{name}" if path else name), param

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, module in self.named_modules(prefix):
            for name, array in module._buffers.items():
                yield (f"{path}.{name}" if path else name), array

    # ---------------------------------------------------------------------------------------
    # 状态
    # ---------------------------------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """参数与缓冲区按注册顺序排列，顺序即权重文件中的张量顺序"""
        state = OrderedDict()
        for name, param in self.named_parameters():
            state[name] = param.data
        for name, array in self.named_buffers():
            state[name] = array
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """原地覆盖参数与缓冲区，名称必须与模型完全一致"""
        own = self.state_dict()
        unknown = [name for name in state if name not in own]
        if unknown:
            raise UnknownTensorError(f"模型中不存在张量: {', '.join(unknown[:5])}")
        missing = [name for name in own if name not in state]
        if missing:
            raise TensorMismatchError(f"缺少张量: {', '.join(missing[:5])}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise TensorMismatchError(
                    f"张量 {name} 形状不一致: 文件 {value.shape}, 模型 {target.shape}"
                )
            target[...] = value

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """原地转换全部参数与缓冲区的数据类型"""
        for _, module in self.named_modules():
            for param in module._params.values():
                param.data = param.data.astype(dtype)
            for name, array in module._buffers.items():
                module._buffers[name] = array.astype(dtype)
        return self

    @property
    def dtype(self):
        for _, param in self.named_parameters():
            return param.dtype
        return np.dtype(DEFAULT_DTYPE)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]


class Sequential(ModuleList):
    def forward(self, x):
        for module in self._items:
            x = module(x)
        return x


class Identity(Module):
    def forward(self, x):
        return x


# -------------------------------------------------------------------------------------------
# 基础层
# -------------------------------------------------------------------------------------------
def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        self.weight = parameter(kaiming_uniform(rng, spec.weight_shape, fan_in))
        self.bias = (
            parameter(kaiming_uniform(rng, (spec.out_channels,), fan_in))
            if spec.has_bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.spec)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.03


class BatchNorm2d(Module):
    # eps/momentum 沿用 YOLOv5 的取值
    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.03):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DEFAULT_DTYPE))

    @property
    def params(self) -> BatchNormParams:
        return BatchNormParams(
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.eps,
            self.momentum,
        )

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.params, training=self.training)


class ConvBnAct(Module):
    """卷积 → 批归一化 → 激活（可选），卷积不带偏置"""

    def __init__(self, spec: Conv2dSpec, act: Optional[str], rng: np.random.Generator):
        super().__init__()
        self.act = act
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(spec.out_channels)

    @property
    def spec(self) -> Conv2dSpec:
        return self.conv.spec

    def forward(self, x: Tensor) -> Tensor:
        return F.activation(self.bn(self.conv(x)), self.act)
