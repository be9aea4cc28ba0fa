"""各子命令共用的参数与配置解析"""

import argparse
import json
import logging
from pathlib import Path
from typing import Optional

from models.config import ModelConfig, apply_preset, load_config
from models.detector import HsiShipNet, build_model
from utils.weights_io import read_weights

logger = logging.getLogger(__name__)


def add_model_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("模型配置")
    group.add_argument("--config", help="JSON 配置文件，默认取 HSINET_CONFIG")
    group.add_argument("--width", type=float, help="宽度系数")
    group.add_argument("--order", type=int, help="g^nConv 阶数 n")
    group.add_argument("--layers", type=int, help="HSI-Former 层数 L")
    group.add_argument("--size", type=int, help="输入尺寸（32 的倍数）")
    group.add_argument("--seed", type=int, help="随机种子")
    group.add_argument("--conf", type=float, help="置信度阈值")
    group.add_argument("--iou", type=float, help="NMS IoU 阈值")


def resolve_config(
    args: argparse.Namespace, settings: dict, defaults: Optional[dict] = None, preset: Optional[str] = None
) -> ModelConfig:
    """配置来源优先级：--config > HSINET_CONFIG > 子命令默认值；命令行覆盖项最后生效"""
    path = getattr(args, "config", None) or settings.get("CONFIG_PATH")
    config = load_config(path) if path else ModelConfig(**(defaults or {}))
    if preset:
        config = apply_preset(config, preset)
    config = config.with_overrides(
        width_multiplier=getattr(args, "width", None),
        hsi_order=getattr(args, "order", None),
        hsi_layers=getattr(args, "layers", None),
        input_size=getattr(args, "size", None),
        seed=getattr(args, "seed", None),
        conf_threshold=getattr(args, "conf", None),
        iou_threshold=getattr(args, "iou", None),
        train_epochs=getattr(args, "epochs", None),
    )
    print_config(config)
    return config


def print_config(config: ModelConfig) -> None:
    print(f"# resolved config: {json.dumps(config.to_dict(), ensure_ascii=False, sort_keys=True)}")


def output_dir(args: argparse.Namespace, settings: dict, name: str) -> Path:
    base = getattr(args, "output", None)
    return Path(base) if base else Path(settings["OUTPUT_DIR"]) / name


def load_model(config: ModelConfig, weights: Optional[str]) -> HsiShipNet:
    model = build_model(config)
    if weights:
        read_weights(weights, model)
        logger.info(f"已加载权重 {weights}")
    else:
        logger.warning("未指定 --weights，使用随机初始化的模型")
    return model
