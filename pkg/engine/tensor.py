"""张量与反向传播

Tensor 只是 numpy 数组加上梯度标记。算子在 Graph 激活期间把执行记录追加到图上，
backward 按记录的逆序回放，每个节点自带向量-雅可比积函数。
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ShapeError

logger = logging.getLogger(__name__)

_ACTIVE_GRAPH = contextvars.ContextVar("active_graph", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    # ndarray 与 Tensor 混合运算时交给 Tensor 的反射运算符
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}{flag}>"

    # 运算符重载走通用广播算子
    def __add__(self, other):
        from engine import functional as F

        return F.add_(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from engine import functional as F

        return F.sub_(self, other)

    def __rsub__(self, other):
        from engine import functional as F

        return F.sub_(F.as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        from engine import functional as F

        return F.mul_(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from engine import functional as F

        return F.div_(self, other)

    def __rtruediv__(self, other):
        from engine import functional as F

        return F.div_(F.as_tensor(other, self.dtype), self)

    def __neg__(self):
        from engine import functional as F

        return F.neg(self)

    def __getitem__(self, key):
        from engine import functional as F

        return F.index(self, key)


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    outputs: Tuple[Tensor, ...]
    vjp: Callable[[Tuple[np.ndarray, ...]], Sequence[Optional[np.ndarray]]]
    spec: Any = None


class Graph:
    """按执行顺序记录算子，天然满足拓扑序"""

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        for out in node.outputs:
            if id(out) in self._produced:
                raise ShapeError(f"算子 {node.op} 的输出被重复记录")
            self._produced.add(id(out))
        self.nodes.append(node)


def active_graph() -> Optional[Graph]:
    return _ACTIVE_GRAPH.get()


def record(op: str, inputs, outputs, vjp, spec=None):
    """把一次算子执行包装成输出张量，并在需要时记录到当前图

    outputs 为单个数组时返回 Tensor，为元组时返回 Tensor 元组。
    """
    inputs = tuple(inputs)
    requires_grad = any(t.requires_grad for t in inputs)
    # 0 维数组参与 ufunc 运算会退化成 numpy 标量
    if isinstance(outputs, np.generic):
        outputs = np.asarray(outputs)
    single = isinstance(outputs, np.ndarray)
    arrays = (outputs,) if single else tuple(outputs)
    tensors = tuple(Tensor(a, requires_grad=requires_grad) for a in arrays)
    graph = _ACTIVE_GRAPH.get()
    if graph is not None and requires_grad:
        graph.record(Node(op, inputs, tensors, vjp, spec))
    return tensors[0] if single else tensors


class Gradients:
    """按张量身份索引的梯度表"""

    def __init__(self, grads: Dict[int, np.ndarray], tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError(f"{tensor!r} 没有梯度（未参与计算或未要求梯度）") from None

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)

    def tensors(self):
        return list(self._tensors.values())


def backward(graph: Graph, loss_seed: Tensor) -> Gradients:
    """从标量损失逆序回放图，返回所有要求梯度的张量的梯度"""
    if loss_seed.size != 1:
        raise ShapeError(f"backward 需要标量损失，实际形状 {loss_seed.shape}")
    grads: Dict[int, np.ndarray] = {id(loss_seed): np.ones_like(loss_seed.data)}
    tensors: Dict[int, Tensor] = {id(loss_seed): loss_seed}

    for node in reversed(graph.nodes):
        out_grads = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = tuple(
            g if g is not None else np.zeros_like(o.data)
            for g, o in zip(out_grads, node.outputs)
        )
        in_grads = node.vjp(out_grads)
        for tensor, grad in zip(node.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                tensors[key] = tensor

    result = {k: g for k, g in grads.items() if tensors[k].requires_grad}
    for key in result:
        tensors[key].grad = result[key]
    logger.debug(f"反向传播完成: {len(graph.nodes)} 个节点, {len(result)} 个梯度")
    return Gradients(result, {k: tensors[k] for k in result})
