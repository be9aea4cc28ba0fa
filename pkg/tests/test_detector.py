import numpy as np
import pytest

from engine.gradcheck import gradcheck
from engine.tensor import Tensor
from models.config import ModelConfig
from models.detector import DetectHead, HsiShipNet, Neck, build_model
from models.postprocess import Detection, box_iou, cxcywh_to_xyxy, decode, decode_level, nms, total_order
from utils.errors import ShapeError

ANCHORS = [[10, 9], [16, 15], [20, 27]]


def small_config(**overrides):
    return ModelConfig(width_multiplier=0.25, input_size=64, **overrides)


# -------------------------------------------------------------------------------------------
# 网络结构
# -------------------------------------------------------------------------------------------
def test_four_level_outputs(rng):
    model = build_model(small_config())
    heads = model(Tensor(rng.uniform(size=(1, 3, 64, 64)).astype(np.float32)))
    assert [h.shape for h in heads] == [(1, 18, 16, 16), (1, 18, 8, 8), (1, 18, 4, 4), (1, 18, 2, 2)]
    assert model.config.strides == (4, 8, 16, 32)


def test_three_level_outputs_without_ptiny(rng):
    model = build_model(small_config(use_ptiny=False, ncls=3))
    heads = model(Tensor(rng.uniform(size=(2, 3, 64, 64)).astype(np.float32)))
    assert [h.shape for h in heads] == [(2, 24, 8, 8), (2, 24, 4, 4), (2, 24, 2, 2)]
    assert model.config.level_anchors == model.config.anchors[1:]


def test_neck_rejects_mismatched_pyramid(rng):
    neck = Neck((8, 12, 20), rng)
    good = [Tensor(np.zeros((1, c, s, s), np.float32)) for c, s in ((8, 8), (12, 4), (20, 2))]
    neck.eval()
    assert [o.shape for o in neck(good)] == [(1, 8, 8, 8), (1, 12, 4, 4), (1, 20, 2, 2)]
    with pytest.raises(ShapeError):
        neck(good[:2])
    bad = good[:2] + [Tensor(np.zeros((1, 20, 3, 3), np.float32))]
    with pytest.raises(ShapeError):
        neck(bad)


def test_head_bias_prior(rng):
    head = DetectHead((8,), (8,), 1, rng)
    obj = head.convs[0].bias.data.reshape(3, 6)[:, 4]
    assert np.all(obj < -5)


def test_detect_is_deterministic(rng):
    config = small_config(conf_threshold=0.0)
    x = Tensor(rng.uniform(size=(1, 3, 64, 64)).astype(np.float32))
    first = HsiShipNet(config).eval().detect(x)
    second = HsiShipNet(config).eval().detect(x)
    assert first == second
    assert len(first) == 1
    assert 0 < len(first[0]) <= config.max_det


def test_end_to_end_gradients(f64, randomize_bn):
    model = build_model(ModelConfig(width_multiplier=0.125, input_size=64)).to(np.float64)
    randomize_bn(model)
    x = f64(1, 3, 64, 64)
    report = gradcheck(lambda: model(x), [x, *model.parameters()])
    assert report.checked >= 100
    assert report.passed(), report.max_rel_error


# -------------------------------------------------------------------------------------------
# 解码
# -------------------------------------------------------------------------------------------
def test_decode_zero_logits_example():
    raw = np.zeros((1, 18, 2, 2))
    rows = decode_level(raw, ANCHORS, 4, 1)
    np.testing.assert_allclose(rows[0, 0], [2, 2, 10, 9, 0.5, 0.5])
    dets = decode([raw], [ANCHORS], [4], conf_threshold=0.25)[0]
    assert len(dets) == 12
    assert all(d.score == pytest.approx(0.25) for d in dets)
    assert decode([raw], [ANCHORS], [4], conf_threshold=0.3) == [[]]


def test_decode_width_is_capped_and_centers_stay_near_cell(rng):
    raw = rng.standard_normal((1, 18, 4, 4)) * 20
    rows = decode_level(raw, ANCHORS, 8, 1).reshape(3, 4, 4, 6)
    anchors = np.array(ANCHORS, dtype=np.float64)
    assert np.all(rows[..., 2] <= 4 * anchors[:, None, None, 0] + 1e-9)
    assert np.all(rows[..., 3] <= 4 * anchors[:, None, None, 1] + 1e-9)
    gx = np.arange(4)[None, None, :]
    gy = np.arange(4)[None, :, None]
    assert np.all(rows[..., 0] >= (gx - 0.5) * 8) and np.all(rows[..., 0] <= (gx + 1.5) * 8)
    assert np.all(rows[..., 1] >= (gy - 0.5) * 8) and np.all(rows[..., 1] <= (gy + 1.5) * 8)


def test_decode_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        decode_level(np.zeros((1, 17, 2, 2)), ANCHORS, 4, 1)
    with pytest.raises(ShapeError):
        decode([np.zeros((1, 18, 2, 2))], [ANCHORS, ANCHORS], [4], 0.25)


# -------------------------------------------------------------------------------------------
# NMS
# -------------------------------------------------------------------------------------------
def det(cx, cy, w, h, score, class_id=0):
    return Detection(cx, cy, w, h, score, class_id, score)


def test_nms_suppresses_heavy_overlap():
    a = det(50, 50, 20, 20, 0.9)
    b = det(50.5, 50, 20, 20, 0.8)
    iou = box_iou(cxcywh_to_xyxy([a.box]), cxcywh_to_xyxy([b.box]))[0, 0]
    assert iou > 0.9
    assert nms([b, a], 0.45) == [a]


def test_nms_keeps_disjoint_and_other_classes():
    a = det(10, 10, 8, 8, 0.9)
    b = det(40, 40, 8, 8, 0.7)
    c = det(10, 10, 8, 8, 0.8, class_id=1)
    assert nms([a, b, c], 0.45) == [a, c, b]


def test_nms_truncates_to_max_out():
    dets = [det(20 * i, 0, 5, 5, 0.5 + i / 100) for i in range(10)]
    out = nms(dets, 0.45, max_out=3)
    assert [d.score for d in out] == sorted((d.score for d in dets), reverse=True)[:3]


def test_total_order_breaks_ties_by_geometry():
    dets = [det(5, 0, 1, 1, 0.5), det(1, 0, 1, 1, 0.5), det(3, 0, 1, 1, 0.9)]
    assert [dets[i].cx for i in total_order(dets)] == [3, 1, 5]


def brute_force_nms(dets, threshold):
    ordered = [dets[i] for i in total_order(dets)]
    kept = []
    for d in ordered:
        same = [k for k in kept if k.class_id == d.class_id]
        if same:
            ious = box_iou(cxcywh_to_xyxy([d.box]), cxcywh_to_xyxy([k.box for k in same]))[0]
            if np.any(ious >= threshold):
                continue
        kept.append(d)
    return kept


def random_dets(rng, count=50):
    return [
        det(*rng.uniform(0, 60, 2), *rng.uniform(4, 30, 2), float(rng.uniform()), int(rng.integers(2)))
        for _ in range(count)
    ]


def test_nms_matches_brute_force():
    for seed in range(500):
        dets = random_dets(np.random.default_rng(seed))
        out = nms(dets, 0.45)
        assert out == brute_force_nms(dets, 0.45), f"seed={seed}"
        for i, a in enumerate(out):
            for b in out[i + 1 :]:
                if a.class_id == b.class_id:
                    assert box_iou(cxcywh_to_xyxy([a.box]), cxcywh_to_xyxy([b.box]))[0, 0] < 0.45


@pytest.mark.parametrize("seed", range(20))
def test_nms_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    dets = random_dets(rng)
    # 同分数的检测框只能靠几何全序区分
    dets += [det(d.cx + 3, d.cy, d.w, d.h, d.score, d.class_id) for d in dets[:10]]
    expected = nms(dets, 0.45)
    for _ in range(5):
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert nms(shuffled, 0.45) == expected


def test_nms_handles_zero_area_boxes():
    a = det(10, 10, 0, 0, 0.9)
    b = det(10, 10, 0, 0, 0.8)
    c = det(10, 10, 4, 4, 0.7)
    assert nms([a, b, c], 0.45) == [a, b, c]
