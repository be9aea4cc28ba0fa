import numpy as np
import pytest

from analysis.anchors import (
    anchors_to_config,
    format_anchors,
    group_anchors,
    iou_wh,
    iou_wh_matrix,
    kmeans_1iou,
)
from utils.errors import ConfigError, DataError


def test_iou_wh_examples():
    assert iou_wh((2, 2), (4, 4)) == pytest.approx(0.25)
    assert iou_wh((1, 4), (4, 1)) == pytest.approx(1 / 7)
    assert iou_wh((3, 5), (3, 5)) == 1.0
    with pytest.raises(ConfigError):
        iou_wh((0, 1), (1, 1))


def test_iou_matrix_matches_scalar(rng):
    boxes = rng.uniform(1, 50, (6, 2))
    centers = rng.uniform(1, 50, (3, 2))
    matrix = iou_wh_matrix(boxes, centers)
    for i in range(6):
        for j in range(3):
            assert matrix[i, j] == pytest.approx(iou_wh(boxes[i], centers[j]))


def test_identical_boxes_give_zero_distance():
    boxes = np.tile([[12.0, 7.0]], (20, 1))
    result = kmeans_1iou(boxes, k=1)
    np.testing.assert_allclose(result.centers, [[12, 7]])
    assert result.mean_distance == pytest.approx(0.0)


@pytest.mark.parametrize("seed", range(20))
def test_recovers_two_clusters(seed):
    rng = np.random.default_rng(seed)
    small = np.array([10.0, 10.0]) + rng.uniform(-0.5, 0.5, (30, 2))
    large = np.array([40.0, 20.0]) + rng.uniform(-0.5, 0.5, (30, 2))
    result = kmeans_1iou(np.concatenate([small, large]), k=2, seed=seed)
    np.testing.assert_allclose(result.centers, [[10, 10], [40, 20]], atol=0.6)


def test_mean_distance_never_increases(rng):
    boxes = np.exp(rng.uniform(1, 4, (200, 2)))
    result = kmeans_1iou(boxes, k=6, seed=3)
    assert all(b <= a + 1e-12 for a, b in zip(result.history, result.history[1:]))
    assert result.mean_distance == result.history[-1]
    assert result.iterations >= 1


def test_twelve_centers_form_four_groups(rng):
    boxes = np.exp(rng.uniform(1.5, 4.5, (300, 2)))
    result = kmeans_1iou(boxes, k=12, seed=0)
    areas = result.centers[:, 0] * result.centers[:, 1]
    assert np.all(np.diff(areas) >= 0)
    assert [len(g) for g in result.groups] == [3, 3, 3, 3]
    lines = result.format().splitlines()
    assert len(lines) == 4
    assert all(len(line.split(", ")) == 3 for line in lines)
    config = anchors_to_config(result.groups)
    assert len(config) == 4 and all(len(g) == 3 for g in config)


def test_grouping_and_format():
    centers = np.array([[float(i), float(i)] for i in range(1, 13)])
    assert format_anchors(group_anchors(centers)).splitlines()[0] == "1,1, 2,2, 3,3"
    assert len(group_anchors(centers[:10])) == 1


def test_kmeans_errors():
    with pytest.raises(DataError):
        kmeans_1iou(np.ones((3, 2)), k=4)
    with pytest.raises(DataError):
        kmeans_1iou(np.array([[1.0, 2.0], [0.0, 3.0]]), k=1)
    with pytest.raises(ConfigError):
        kmeans_1iou(np.ones((3, 2)), k=0)


def test_kmeans_is_seed_deterministic(rng):
    boxes = np.exp(rng.uniform(1, 4, (80, 2)))
    a = kmeans_1iou(boxes, k=5, seed=11)
    b = kmeans_1iou(boxes, k=5, seed=11)
    np.testing.assert_array_equal(a.centers, b.centers)
