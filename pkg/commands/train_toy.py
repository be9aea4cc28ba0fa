"""train-toy: 在合成数据集（或给定标注）上训练小模型"""

import logging
from pathlib import Path

from commands.common import add_model_args, output_dir, resolve_config
from models.trainer import evaluate_samples, load_samples, train
from utils.toy_dataset import make_toy_dataset
from utils.weights_io import save_weights

logger = logging.getLogger(__name__)

TOY_DEFAULTS = {"width_multiplier": 0.25, "input_size": 160}


def register(subparsers) -> None:
    parser = subparsers.add_parser("train-toy", help="小规模训练")
    add_model_args(parser)
    parser.add_argument("--epochs", type=int, help="训练轮数")
    parser.add_argument("--count", type=int, default=16, help="合成图片数量")
    parser.add_argument("--input", help="已有的标注 CSV；不给则生成合成数据集")
    parser.add_argument("--output", help="输出目录，默认 HSINET_OUTPUT_DIR/train-toy")
    parser.set_defaults(handler=run)


def run(args, settings) -> int:
    config = resolve_config(args, settings, defaults=TOY_DEFAULTS)
    out = output_dir(args, settings, "train-toy")
    out.mkdir(parents=True, exist_ok=True)

    if args.input:
        csv_path = Path(args.input)
    else:
        csv_path, _ = make_toy_dataset(out / "data", args.count, config.input_size, config.seed)
    samples = load_samples(csv_path, config.input_size)

    result = train(config, samples, log_path=out / "loss.csv")
    weights_path = out / "weights.hsiw"
    save_weights(result.model, weights_path)
    # 聚类后的 anchor 写进配置，推理时用 --config 读回
    (out / "config.json").write_text(result.config.to_json(), encoding="utf-8")

    report, _ = evaluate_samples(
        result.model, samples, result.config.conf_threshold, settings.get("THREADS", 0)
    )
    print(report.format())
    print(f"权重 -> {weights_path}")
    return 0
