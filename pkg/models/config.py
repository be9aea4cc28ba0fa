"""模型配置

一个 JSON 文档对应一个 ModelConfig；命令行参数在其上覆盖。
消融预设只改动拓扑相关的字段（P_tiny 分支、注意力类型、HSI-Former 的 L 与 n）。
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from models.attention import ATTENTION_KINDS
from models.backbone import BackboneSpec
from models.hsi_former import channel_schedule
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_ANCHORS = [
    [[7, 16], [10, 9], [18, 7]],
    [[16, 15], [20, 27], [34, 16]],
    [[37, 30], [60, 21], [26, 58]],
    [[63, 34], [45, 54], [66, 57]],
]

STRIDES = (4, 8, 16, 32)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 0.01
    lrf: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: int = 3
    # warmup 迭代数 = max(warmup_epochs × 每轮 batch 数, warmup_min_iters)
    warmup_min_iters: int = 100
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    # 每步损失乘以 round(nominal_batch / batch_size)，至少为 1
    nominal_batch: int = 64
    box_w: float = 0.05
    obj_w: float = 1.0
    cls_w: float = 0.5
    cluster_anchors: bool = True


@dataclass
class ModelConfig:
    width_multiplier: float = 1.0
    input_size: int = 640
    ncls: int = 1
    hsi_order: int = 3
    hsi_layers: int = 1
    use_hsi: bool = True
    use_ptiny: bool = True
    attention: str = "lhab"
    anchors: List[List[List[float]]] = field(default_factory=lambda: [g[:] for g in DEFAULT_ANCHORS])
    conf_threshold: float = 0.25
    iou_threshold: float = 0.45
    max_det: int = 300
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = _from_dict(TrainConfig, self.train, "train")
        self.validate()

    def validate(self) -> None:
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier 必须为正，实际 {self.width_multiplier}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size 必须为 32 的正整数倍，实际 {self.input_size}")
        if self.ncls < 1:
            raise ConfigError(f"ncls 必须 >= 1，实际 {self.ncls}")
        if self.hsi_layers < 1 or self.hsi_order < 1:
            raise ConfigError(f"HSI-Former 的 L 与 n 必须 >= 1: L={self.hsi_layers}, n={self.hsi_order}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention 必须为 {', '.join(ATTENTION_KINDS)} 之一，实际 {self.attention!r}")
        for name in ("conf_threshold", "iou_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} 必须位于 [0,1]，实际 {value}")
        if self.max_det < 1:
            raise ConfigError(f"max_det 必须 >= 1，实际 {self.max_det}")
        if len(self.anchors) != 4 or any(len(g) != 3 for g in self.anchors):
            raise ConfigError("anchors 必须为 4 组，每组 3 个 (w,h)")
        for group in self.anchors:
            for pair in group:
                if len(pair) != 2 or min(pair) <= 0:
                    raise ConfigError(f"anchor {pair} 必须为两个正数")
        if self.use_hsi:
            channel_schedule(
                BackboneSpec(width_multiplier=self.width_multiplier).tap_channels[-1],
                self.hsi_order,
            )
        if self.train.epochs < 1 or self.train.batch_size < 1 or self.train.nominal_batch < 1:
            raise ConfigError("epochs、batch_size 与 nominal_batch 必须 >= 1")
        if self.train.warmup_epochs < 0 or self.train.warmup_min_iters < 0:
            raise ConfigError("warmup 轮数与迭代数不能为负")
        if min(self.train.box_w, self.train.obj_w, self.train.cls_w) < 0 or not any(
            (self.train.box_w, self.train.obj_w, self.train.cls_w)
        ):
            raise ConfigError("损失权重必须非负且至少一个为正")

    # ---------------------------------------------------------------------------------------
    # 派生量
    # ---------------------------------------------------------------------------------------
    @property
    def levels(self) -> int:
        return 4 if self.use_ptiny else 3

    @property
    def strides(self) -> tuple:
        return STRIDES[-self.levels :]

    @property
    def level_anchors(self) -> List[List[List[float]]]:
        return self.anchors[-self.levels :]

    # ---------------------------------------------------------------------------------------
    # 序列化
    # ---------------------------------------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data, "config")

    def with_overrides(self, **overrides) -> "ModelConfig":
        """覆盖非 None 的字段，train.* 字段用前缀 train_ 指定"""
        top, train = {}, {}
        names = {f.name for f in fields(self)}
        train_names = {f.name for f in fields(TrainConfig)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key.startswith("train_") and key[6:] in train_names:
                train[key[6:]] = value
            elif key in names:
                top[key] = value
            else:
                raise ConfigError(f"未知配置项 {key!r}")
        if train:
            top["train"] = replace(self.train, **train)
        return replace(self, **top)


def _from_dict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} 必须是 JSON 对象")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where} 中存在未知字段: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where} 字段类型错误: {e}") from e


def load_config(path: Optional[str]) -> ModelConfig:
    if not path:
        return ModelConfig()
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        data = json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件 {path} 不是合法 JSON: {e}") from e
    config = ModelConfig.from_dict(data)
    logger.debug(f"已加载配置 {path}")
    return config


# -------------------------------------------------------------------------------------------
# 消融预设
# -------------------------------------------------------------------------------------------
_BASELINE = {"use_ptiny": True, "attention": "se", "use_hsi": False}
_FULL_HSI = {"use_ptiny": True, "use_hsi": True, "hsi_layers": 1, "hsi_order": 3}

PRESETS: Dict[str, Dict[str, Any]] = {
    "ghostnet": {**_BASELINE, "use_ptiny": False},
    "ghostnet_ptiny": dict(_BASELINE),
    **{
        f"hsi_l1_n{n}": {**_BASELINE, "use_hsi": True, "hsi_layers": 1, "hsi_order": n}
        for n in (1, 2, 3, 4)
    },
    "hsi_l2_n3": {**_BASELINE, "use_hsi": True, "hsi_layers": 2, "hsi_order": 3},
    "eca_avg": {**_FULL_HSI, "attention": "eca_avg"},
    "eca_shared": {**_FULL_HSI, "attention": "eca_shared"},
    "eca_dual": {**_FULL_HSI, "attention": "eca_dual"},
    "lhab": {**_FULL_HSI, "attention": "lhab"},
}


def apply_preset(config: ModelConfig, name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"未知预设 {name!r}，可选: {', '.join(PRESETS)}")
    return config.with_overrides(**PRESETS[name])
