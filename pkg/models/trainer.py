"""小规模训练循环

流程：按训练集标注聚类 anchor → 构建模型（BN 训练模式）→ SGD + warmup + 余弦退火。
整个过程单线程、按 seed 完全确定。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from analysis.anchors import anchors_to_config, kmeans_1iou
from analysis.metrics import EvalReport, evaluate
from engine.optim import SGD, SGDConfig, cosine_lr, param_groups, warmup_ramp
from engine.tensor import Graph, Tensor, backward
from models.config import ModelConfig
from models.detector import HsiShipNet
from models.loss import LossWeights, compute_loss
from models.postprocess import decode, nms
from utils.annotations import group_by_image, read_annotations, resolve_image
from utils.errors import DataError
from utils.image_io import load_image

logger = logging.getLogger(__name__)

EVAL_CANDIDATE_CONF = 0.001
ANCHOR_K = 12


@dataclass
class Sample:
    """一张已 letterbox 的训练图片；boxes 为模型输入像素下的 [class, cx, cy, w, h]"""

    name: str
    image: np.ndarray
    boxes: np.ndarray


@dataclass
class EpochLog:
    epoch: int
    lr: float
    total: float
    box: float
    obj: float
    cls: float

    def format(self) -> str:
        return f"{self.epoch},{self.lr:.6f},{self.total:.6f},{self.box:.6f},{self.obj:.6f},{self.cls:.6f}"


@dataclass
class TrainResult:
    model: HsiShipNet
    config: ModelConfig
    history: List[EpochLog] = field(default_factory=list)
    warmup_iters: int = 0
    batches_per_epoch: int = 1

    @property
    def warmup_epochs(self) -> int:
        """全部或部分处于 warmup 的 epoch 数"""
        return -(-self.warmup_iters // self.batches_per_epoch)


def load_samples(csv_path: Union[str, Path], input_size: int) -> List[Sample]:
    """读取标注 CSV 及其图片，标注框换算到 letterbox 之后的像素坐标"""
    samples = []
    for name, gts in group_by_image(read_annotations(csv_path)).items():
        tensor, transform = load_image(resolve_image(csv_path, name), input_size)
        boxes = gts.copy()
        boxes[:, [1, 3]] *= transform.src_w
        boxes[:, [2, 4]] *= transform.src_h
        boxes[:, 1:] *= transform.scale
        boxes[:, 1] += transform.pad_x
        boxes[:, 2] += transform.pad_y
        samples.append(Sample(name, tensor.data[0], boxes))
    if not samples:
        raise DataError(f"标注文件中没有任何目标: {csv_path}")
    logger.info(f"训练样本加载完成: {len(samples)} 张图")
    return samples


def cluster_config_anchors(config: ModelConfig, samples: Sequence[Sample], seed: int) -> ModelConfig:
    """用训练集框的 1-IoU 聚类结果替换配置中的 anchor"""
    wh = np.concatenate([s.boxes[:, 3:5] for s in samples], axis=0)
    if len(wh) < ANCHOR_K:
        logger.warning(f"训练集只有 {len(wh)} 个框，少于 {ANCHOR_K}，沿用配置中的 anchor")
        return config
    result = kmeans_1iou(wh, k=ANCHOR_K, seed=seed)
    anchors = [[[max(1.0, w), max(1.0, h)] for w, h in group] for group in anchors_to_config(result.groups)]
    logger.info(f"聚类得到的 anchor:\n{result.format()}")
    return config.with_overrides(anchors=anchors)


def _batch_targets(batch: Sequence[Sample]) -> np.ndarray:
    rows = [
        np.concatenate([np.full((len(s.boxes), 1), i, dtype=np.float64), s.boxes], axis=1)
        for i, s in enumerate(batch)
    ]
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 6))


def train(
    config: ModelConfig,
    samples: Sequence[Sample],
    epochs: Optional[int] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Args:
        config: 模型与训练配置；cluster_anchors 为真时先聚类 anchor
        samples: load_samples 的结果
        epochs: 覆盖 config.train.epochs
        log_path: 每个 epoch 追加一行 "epoch,lr,total,box,obj,cls"

    Returns:
        TrainResult，模型已切回推理模式
    """
    tc = config.train
    epochs = epochs or tc.epochs
    if tc.cluster_anchors:
        config = cluster_config_anchors(config, samples, config.seed)

    model = HsiShipNet(config)
    model.train()
    optimizer = SGD(param_groups(model, tc.weight_decay), SGDConfig(tc.lr, tc.momentum, tc.weight_decay))
    weights = LossWeights(tc.box_w, tc.obj_w, tc.cls_w)
    rng = np.random.default_rng(config.seed)

    batches_per_epoch = -(-len(samples) // tc.batch_size)
    warmup_iters = max(tc.warmup_epochs * batches_per_epoch, tc.warmup_min_iters) if tc.warmup_epochs else 0
    loss_scale = float(max(round(tc.nominal_batch / tc.batch_size), 1))
    logger.info(
        f"开始训练: {epochs} 轮, 每轮 {batches_per_epoch} 个 batch, "
        f"warmup {warmup_iters} 次迭代, 损失放大 {loss_scale:g} 倍"
    )
    log_file = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", encoding="utf-8")
        log_file.write("epoch,lr,total,box,obj,cls\n")

    history: List[EpochLog] = []
    iteration = 0
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(samples))
            sums = np.zeros(4)
            base_lr = cosine_lr(epoch, epochs, tc.lr, tc.lrf)
            for start in range(0, len(order), tc.batch_size):
                batch = [samples[i] for i in order[start : start + tc.batch_size]]
                x = Tensor(np.stack([s.image for s in batch]).astype(model.dtype))
                optimizer.set_lr(
                    warmup_ramp(iteration, warmup_iters, base_lr),
                    warmup_ramp(iteration, warmup_iters, base_lr, start=tc.warmup_bias_lr),
                )
                optimizer.momentum = warmup_ramp(iteration, warmup_iters, tc.momentum, start=tc.warmup_momentum)
                with Graph() as graph:
                    heads = model(x)
                    items = compute_loss(
                        heads, _batch_targets(batch), config.level_anchors, config.strides, weights, config.ncls
                    )
                    scaled = items.total * loss_scale
                grads = backward(graph, scaled)
                optimizer.step(grads)
                iteration += 1
                sums += [float(items.total.data), items.box, items.obj, items.cls]
            mean = sums / batches_per_epoch
            record = EpochLog(epoch, optimizer.lr, *mean.tolist())
            history.append(record)
            logger.info(
                f"epoch {epoch + 1}/{epochs}: loss {record.total:.4f} "
                f"(box {record.box:.4f}, obj {record.obj:.4f}, cls {record.cls:.4f}), lr {record.lr:.5f}"
            )
            if log_file:
                log_file.write(record.format() + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()

    model.eval()
    return TrainResult(model, config, history, warmup_iters, batches_per_epoch)


def predict_samples(
    model: HsiShipNet, samples: Sequence[Sample], conf_threshold: float = EVAL_CANDIDATE_CONF
) -> List[list]:
    cfg = model.config
    predictions = []
    for sample in samples:
        heads = model(Tensor(sample.image[None].astype(model.dtype)))
        candidates = decode(heads, cfg.level_anchors, cfg.strides, conf_threshold, cfg.ncls)[0]
        predictions.append(nms(candidates, cfg.iou_threshold, cfg.max_det))
    return predictions


def evaluate_samples(
    model: HsiShipNet, samples: Sequence[Sample], conf_threshold: float = 0.25, threads: int = 0
) -> Tuple[EvalReport, List[list]]:
    """在样本上推理并计算 P/R/mAP@0.5"""
    predictions = predict_samples(model, samples)
    report = evaluate(
        predictions,
        [s.boxes for s in samples],
        ncls=model.config.ncls,
        conf_threshold=conf_threshold,
        threads=threads,
    )
    return report, predictions
