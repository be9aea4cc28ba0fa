"""算子级 FLOP 记录

Profiler 处于激活状态时，每个算子把自身的 FLOP 数和输出形状记到当前作用域下；
作用域由 Module.__call__ 按层级名压栈。
"""

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Tuple

_ACTIVE_PROFILER = contextvars.ContextVar("active_profiler", default=None)
_SCOPE = contextvars.ContextVar("module_scope", default=())


@dataclass
class OpRecord:
    scope: str
    op: str
    flops: int
    out_shape: Tuple[int, ...]


@dataclass
class Profiler:
    records: List[OpRecord] = field(default_factory=list)

    def __enter__(self):
        self._token = _ACTIVE_PROFILER.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_PROFILER.reset(self._token)
        return False

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.records)


@contextmanager
def scope(name: str):
    """进入一个模块作用域，名称以点号拼接"""
    token = _SCOPE.set(_SCOPE.get() + (name,))
    try:
        yield
    finally:
        _SCOPE.reset(token)


def current_scope() -> str:
    return ".".join(p for p in _SCOPE.get() if p)


def note(op: str, flops: int, out_shape) -> None:
    profiler = _ACTIVE_PROFILER.get()
    if profiler is None:
        return
    profiler.records.append(
        OpRecord(current_scope(), op, int(flops), tuple(int(d) for d in out_shape))
    )
