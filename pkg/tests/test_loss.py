import numpy as np
import pytest

from engine.tensor import Graph, Tensor, backward
from models.loss import LossWeights, bbox_ciou, build_targets, compute_loss
from utils.errors import ConfigError, ShapeError

ONE_ANCHOR = [[[16, 16]]]


def test_perfect_prediction_has_no_box_loss():
    heads = [Tensor(np.zeros((1, 6, 8, 8)))]
    targets = np.array([[0, 0, 20, 20, 16, 16]], dtype=np.float64)
    items = compute_loss(heads, targets, ONE_ANCHOR, [8])
    assert items.box < 1e-6


def test_single_cell_assignment():
    targets = np.array([[0, 0, 20, 20, 16, 16]], dtype=np.float64)
    (level,) = build_targets(targets, [(8, 8)], ONE_ANCHOR, [8])
    assert len(level) == 1
    assert (level.gi[0], level.gj[0]) == (2, 2)
    np.testing.assert_allclose(level.tbox[0], [0.5, 0.5, 2, 2])


def test_neighbor_cells_are_assigned():
    # 中心 (2.3, 2.7) 格：左侧与下方的邻格也参与
    targets = np.array([[0, 0, 2.3 * 8, 2.7 * 8, 16, 16]], dtype=np.float64)
    (level,) = build_targets(targets, [(8, 8)], ONE_ANCHOR, [8])
    cells = sorted(zip(level.gi.tolist(), level.gj.tolist()))
    assert cells == [(1, 2), (2, 2), (2, 3)]


def test_anchor_ratio_filter():
    targets = np.array([[0, 0, 32, 32, 200, 10]], dtype=np.float64)
    (level,) = build_targets(targets, [(8, 8)], ONE_ANCHOR, [8])
    assert len(level) == 0


def test_no_targets_with_confident_background():
    heads = [Tensor(np.full((2, 6, 4, 4), -20.0))]
    items = compute_loss(heads, np.zeros((0, 6)), ONE_ANCHOR, [8])
    assert items.box == 0 and items.cls == 0
    assert items.obj < 1e-6
    assert float(items.total.data) < 1e-5


def test_total_is_weighted_sum_times_batch(rng):
    heads = [Tensor(rng.standard_normal((2, 6, 8, 8))), Tensor(rng.standard_normal((2, 6, 4, 4)))]
    anchors = [[[8, 8]], [[24, 24]]]
    targets = np.array([[0, 0, 20, 20, 12, 12], [1, 0, 40, 24, 30, 20]], dtype=np.float64)
    weights = LossWeights(box_w=0.05, obj_w=1.0, cls_w=0.5, balance=(1.0, 0.5))
    items = compute_loss(heads, targets, anchors, [8, 16], weights)
    expected = (0.05 * items.box + 1.0 * items.obj + 0.5 * items.cls) * 2
    assert float(items.total.data) == pytest.approx(expected)
    assert set(items.as_dict()) == {"total", "box", "obj", "cls"}


def test_loss_gradients_reach_heads(rng):
    head = Tensor(rng.standard_normal((1, 6, 8, 8)) * 0.1, requires_grad=True)
    targets = np.array([[0, 0, 20, 28, 10, 18]], dtype=np.float64)
    with Graph() as graph:
        items = compute_loss([head], targets, ONE_ANCHOR, [8])
    grads = backward(graph, items.total)
    g = grads[head]
    assert g.shape == head.shape
    assert np.all(np.isfinite(g))
    # 正样本所在格的框分量有梯度，远处格只有 objectness 梯度
    assert np.any(g[0, :4, 3, 2] != 0)
    assert not np.any(g[0, :4, 7, 7])
    assert g[0, 4, 7, 7] > 0


def test_ciou_of_identical_boxes_is_one():
    xy = Tensor(np.array([[0.5, 0.5], [0.2, 0.7]]))
    wh = Tensor(np.array([[2.0, 3.0], [1.0, 1.0]]))
    iou = bbox_ciou(xy, wh, xy.data.copy(), wh.data.copy())
    np.testing.assert_allclose(iou.data, 1.0, atol=1e-6)


def test_ciou_penalizes_distance():
    wh = np.array([[2.0, 2.0]])
    near = bbox_ciou(Tensor(np.array([[0.5, 0.5]])), Tensor(wh), np.array([[0.6, 0.5]]), wh).data[0]
    far = bbox_ciou(Tensor(np.array([[0.5, 0.5]])), Tensor(wh), np.array([[1.5, 0.5]]), wh).data[0]
    assert far < near < 1


def test_loss_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        compute_loss([Tensor(np.zeros((1, 7, 4, 4)))], np.zeros((0, 6)), ONE_ANCHOR, [8])
    with pytest.raises(ConfigError):
        LossWeights(box_w=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(balance=(1.0,)).level_balance(2)
