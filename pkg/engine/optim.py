"""SGD 优化器与学习率调度"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from engine.tensor import Gradients, Tensor

logger = logging.getLogger(__name__)


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    nesterov: bool = True


@dataclass
class ParamGroup:
    name: str
    params: List[Tensor] = field(default_factory=list)
    weight_decay: float = 0.0
    lr: float = 0.0


class SGD:
    """带动量的 SGD，每组参数有各自的学习率与权重衰减"""

    def __init__(self, groups: List[ParamGroup], config: SGDConfig):
        self.config = config
        self.groups = groups
        self.momentum = config.momentum
        self._velocity: Dict[int, np.ndarray] = {}
        self.set_lr(config.lr)

    @property
    def lr(self) -> float:
        return self.groups[0].lr

    def set_lr(self, lr: float, bias_lr: float = None) -> None:
        """bias_lr 只作用于 bias 组，warmup 期间偏置从更大的学习率降下来"""
        for group in self.groups:
            group.lr = bias_lr if bias_lr is not None and group.name == "bias" else lr

    def step(self, grads: Gradients) -> None:
        m = self.momentum
        for group in self.groups:
            for p in group.params:
                g = grads.get(p)
                if g is None:
                    continue
                if group.weight_decay:
                    g = g + group.weight_decay * p.data
                v = self._velocity.get(id(p))
                v = g if v is None else m * v + g
                self._velocity[id(p)] = v
                update = g + m * v if self.config.nesterov else v
                p.data -= (group.lr * update).astype(p.dtype, copy=False)


def param_groups(model, weight_decay: float = 5e-4) -> List[ParamGroup]:
    """卷积核（含一维注意力核）进入衰减组；BN 的 gamma 与所有偏置（BN beta、卷积 bias）不衰减

    Returns:
        [weight, norm, bias] 三组，顺序固定
    """
    weight = ParamGroup("weight", weight_decay=weight_decay)
    norm = ParamGroup("norm")
    bias = ParamGroup("bias")
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            norm.params.append(p)
        elif name.endswith(("beta", "bias")):
            bias.params.append(p)
        else:
            weight.params.append(p)
    logger.debug(
        f"参数分组: weight {len(weight.params)}, norm {len(norm.params)}, bias {len(bias.params)}"
    )
    return [weight, norm, bias]


def cosine_lr(epoch: int, epochs: int, base_lr: float, lrf: float = 0.01) -> float:
    """余弦退火，从 base_lr 降到 base_lr * lrf"""
    ratio = ((1 - math.cos(epoch * math.pi / max(epochs, 1))) / 2) * (lrf - 1) + 1
    return base_lr * ratio


def warmup_ramp(iteration: int, warmup_iters: int, target: float, start: float = 0.0) -> float:
    """warmup 期间从 start 线性过渡到 target，学习率与动量共用"""
    if warmup_iters <= 0 or iteration >= warmup_iters:
        return target
    return start + (target - start) * (iteration + 1) / warmup_iters
