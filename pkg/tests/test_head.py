import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmsrdet.head import (DEFAULT_ANCHORS, Detect, HeadConfig, LossConfig, assign_targets, bbox_ciou, decode,
                          decode_grid, detection_loss, encode_box, kmeans_anchors, nms, postprocess, total_loss)
from mmsrdet.model import build_model, preset
from randomfixtures import random_boxes
from oracles import nms_oracle
from gradfixtures import loss_gradient_error

ANCH = torch.tensor(DEFAULT_ANCHORS[:1], dtype=torch.float64)


def sig(x):
    return 1 / (1 + math.exp(-x))


# --- head forward ------------------------------------------------------------


def test_one_detector_grid_shape():
    model = build_model(preset("multi", n_classes=5)).eval()
    raw, sr = model(torch.rand(2, 3, 256, 256), torch.rand(2, 1, 256, 256))
    assert sr is None and len(raw) == 1
    assert raw[0].shape == (2, 3, 64, 64, 10)
    assert model.strides == [4.0]


def test_three_detector_grids():
    model = build_model(preset("yolov5s-nofocus")).eval()
    raw, _ = model(torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64))
    assert [r.shape[2] for r in raw] == [16, 8, 4]
    assert model.strides == [4.0, 8.0, 16.0]
    focus = build_model(preset("yolov5s")).eval()
    assert focus.strides == [8.0, 16.0, 32.0]


def test_zero_weights_give_bias_objectness():
    det = Detect(3, [16], [8], ANCH.float())
    with torch.no_grad():
        det.m[0].weight.zero_()
    out = det([torch.rand(1, 16, 4, 4)])[0]
    bias = det.m[0].bias.view(3, -1)[:, 4]
    assert torch.allclose(out[..., 4], bias.view(1, 3, 1, 1).expand(1, 3, 4, 4))


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(n_detectors=2).validate()
    with pytest.raises(ValueError):
        HeadConfig(conf_threshold=1.5).validate()


# --- decoding ----------------------------------------------------------------


def _blank(h=4, w=4, nc=2):
    raw = torch.full((1, 3, h, w, 5 + nc), -20.0, dtype=torch.float64)
    return raw


def test_all_negative_objectness_decodes_empty():
    assert len(decode([_blank()], [8], ANCH, 0.001)[0]) == 0


def test_single_cell_decode_oracle():
    raw = _blank()
    raw[0, 1, 2, 3, :7] = torch.tensor([0.3, -0.2, 0.1, 0.4, 5.0, 2.0, -1.0], dtype=torch.float64)
    rows = decode([raw], [8], ANCH, 0.001)[0]
    assert len(rows) == 1
    cls, score, x1, y1, x2, y2 = rows[0]
    aw, ah = DEFAULT_ANCHORS[0][1]
    cx = (2 * sig(0.3) - 0.5 + 3) * 8
    cy = (2 * sig(-0.2) - 0.5 + 2) * 8
    w = (2 * sig(0.1)) ** 2 * aw
    h = (2 * sig(0.4)) ** 2 * ah
    assert cls == 0
    assert score == pytest.approx(sig(5.0) * sig(2.0), rel=1e-12)
    assert (x1, y1, x2, y2) == pytest.approx((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), abs=1e-9)


def test_decode_monotone_in_objectness():
    g = torch.Generator().manual_seed(0)
    raw = torch.randn(1, 3, 4, 4, 7, generator=g, dtype=torch.float64)
    before = decode([raw], [8], ANCH, 0.3)[0]
    raw2 = raw.clone()
    raw2[0, 0, 1, 1, 4] += 3.0
    after = decode([raw2], [8], ANCH, 0.3)[0]
    key = lambda r: tuple(np.round(r[[0, 2, 3, 4, 5]], 9))  # noqa: E731
    assert {key(r) for r in before} <= {key(r) for r in after}


@settings(max_examples=60, deadline=None)
@given(gx=st.integers(0, 7), gy=st.integers(0, 7), ox=st.floats(-0.45, 1.45), oy=st.floats(-0.45, 1.45),
       a=st.integers(0, 2), sw=st.floats(0.05, 3.9), sh=st.floats(0.05, 3.9))
def test_encode_decode_round_trip(gx, gy, ox, oy, a, sw, sh):
    stride = 8.0
    aw, ah = DEFAULT_ANCHORS[0][a]
    box = np.array([(gx + ox) * stride, (gy + oy) * stride, sw * aw, sh * ah])
    t = encode_box(box, (gx, gy), (aw, ah), stride)
    raw = torch.zeros(1, 3, 8, 8, 7, dtype=torch.float64)
    raw[0, a, gy, gx, :4] = torch.from_numpy(t)
    d = decode_grid(raw, stride, ANCH[0])[0, a, gy, gx, :4].numpy()
    assert np.abs(d - box).max() < 1e-5


def test_encode_rejects_unreachable_box():
    with pytest.raises(ValueError):
        encode_box([100.0, 4.0, 10, 13], (0, 0), (10, 13), 8)


# --- nms ---------------------------------------------------------------------


def test_nms_examples():
    disjoint = np.array([[0, 0.9, 0, 0, 10, 10], [0, 0.8, 20, 20, 30, 30], [1, 0.7, 0, 0, 10, 10]])
    assert np.array_equal(nms(disjoint, 0.5), disjoint)
    same = np.array([[0, 0.8, 0, 0, 10, 10], [0, 0.9, 0, 0, 10, 10]])
    kept = nms(same, 0.5)
    assert len(kept) == 1 and kept[0, 1] == 0.9
    assert nms(np.zeros((0, 6)), 0.5).shape == (0, 6)


def test_nms_ten_random_boxes():
    rows = random_boxes(np.random.default_rng(10), 10)
    assert np.array_equal(nms(rows, 0.5), nms_oracle(rows, 0.5))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(0, 20), thr=st.floats(0.1, 0.9))
def test_nms_matches_brute_force(seed, n, thr):
    rows = random_boxes(np.random.default_rng(seed), n)
    got, want = nms(rows, thr), nms_oracle(rows, thr)
    assert got.shape == want.shape and np.array_equal(got, want)


def test_postprocess_caps_detections():
    g = torch.Generator().manual_seed(1)
    raw = torch.randn(1, 3, 8, 8, 7, generator=g) + torch.tensor([0, 0, 0, 0, 3, 0, 0.0])
    out = postprocess([raw], [8], ANCH.float(), 0.001, 0.99, image_size=(64, 64), max_det=5)[0]
    assert len(out) == 5
    assert out[:, 2:].min() >= 0 and out[:, 2:].max() <= 64


# --- target assignment ---------------------------------------------------------


def assign_oracle(labels, h, w, stride, anchors, anchor_t=4.0):
    """Loop transcription of the matching rule; returns a Counter of (b, a, gj, gi, cls)."""
    out = Counter()
    for b, c, cx, cy, bw, bh in labels:
        gx, gy, gw, gh = cx * w, cy * h, bw * w, bh * h
        for a, (aw, ah) in enumerate(anchors):
            aw, ah = aw / stride, ah / stride
            if max(gw / aw, aw / gw, gh / ah, ah / gh) >= anchor_t:
                continue
            ci, cj = int(gx), int(gy)
            cells = [(ci, cj)]
            if gx % 1 < 0.5 and gx > 1:
                cells.append((ci - 1, cj))
            if gy % 1 < 0.5 and gy > 1:
                cells.append((ci, cj - 1))
            if gx % 1 > 0.5 and w - gx > 1:
                cells.append((ci + 1, cj))
            if gy % 1 > 0.5 and h - gy > 1:
                cells.append((ci, cj + 1))
            for i, j in cells:
                out[(int(b), a, min(max(j, 0), h - 1), min(max(i, 0), w - 1), int(c))] += 1
    return out


def _assigned(t, level=0):
    b, a, gj, gi = t.indices[level]
    return Counter(zip(b.tolist(), a.tolist(), gj.tolist(), gi.tolist(), t.tcls[level].tolist()))


def test_centered_label_matching_one_anchor():
    aw, ah = DEFAULT_ANCHORS[0][0]
    s, g = 8, 8
    labels = torch.tensor([[0, 1, 0.5, 0.5, aw / (s * g), ah / (s * g)]])
    t = assign_targets(labels, [(g, g)], [s], ANCH)
    cells = {(gj, gi) for b, a, gj, gi, c in _assigned(t) if a == 0}
    assert cells == {(4, 4), (4, 3), (3, 4)}
    # the box offsets are measured from each assigned cell
    b, a, gj, gi = t.indices[0]
    for k in range(len(b)):
        assert t.tbox[0][k, 0] + gi[k] == pytest.approx(4.0)
        assert t.tbox[0][k, 1] + gj[k] == pytest.approx(4.0)


def test_empty_and_ratio_bound():
    t = assign_targets(torch.zeros(0, 6), [(8, 8)], [8], ANCH)
    assert t.n_positive() == 0
    tall = torch.tensor([[0, 0, 0.5, 0.5, 0.01, 0.99]])
    assert assign_targets(tall, [(8, 8)], [8], ANCH).n_positive() == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 2), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
                          st.floats(0.02, 0.6), st.floats(0.02, 0.6)), max_size=6),
       st.sampled_from([(8, 8), (4, 6), (16, 16)]))
def test_assignment_rule_transcription(labels, hw):
    h, w = hw
    lab = torch.tensor(labels, dtype=torch.float64).reshape(-1, 6)
    t = assign_targets(lab, [(h, w)], [8], ANCH)
    assert _assigned(t) == assign_oracle(labels, h, w, 8, DEFAULT_ANCHORS[0])
    b, a, gj, gi = t.indices[0]
    assert (gj >= 0).all() and (gj < h).all() and (gi >= 0).all() and (gi < w).all()
    if len(b):
        # offsets stay inside the reachable (-0.5, 1.5) window of the decoder
        assert t.tbox[0][:, :2].min() >= -0.5 - 1e-9 and t.tbox[0][:, :2].max() <= 1.5 + 1e-9


def test_assignment_deterministic():
    lab = torch.tensor([[0, 1, 0.3, 0.6, 0.1, 0.2], [1, 0, 0.7, 0.2, 0.3, 0.2]])
    a = assign_targets(lab, [(8, 8)], [8], ANCH)
    b = assign_targets(lab, [(8, 8)], [8], ANCH)
    assert _assigned(a) == _assigned(b)


# --- losses ------------------------------------------------------------------


def _fixture(nc=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(2, 3, 8, 8, 5 + nc, generator=g, dtype=torch.float64)
    labels = torch.tensor([[0, 0, 0.31, 0.42, 0.2, 0.25], [1, 2, 0.7, 0.66, 0.15, 0.3]], dtype=torch.float64)
    return raw, assign_targets(labels, [(8, 8)], [8], ANCH)


def test_no_positive_loss():
    raw, _ = _fixture()
    t = assign_targets(torch.zeros(0, 6), [(8, 8)], [8], ANCH)
    br = detection_loss([raw], t, LossConfig().resolved(1, 3), 3)
    assert br.l_loc == 0 and br.l_cls == 0 and br.l_obj > 0


def test_perfect_predictions_have_tiny_loss():
    nc = 3
    labels = torch.tensor([[0, 0, 0.31, 0.42, 0.2, 0.25], [0, 2, 0.72, 0.68, 0.15, 0.3]], dtype=torch.float64)
    t = assign_targets(labels, [(8, 8)], [8], ANCH)
    raw = torch.full((1, 3, 8, 8, 5 + nc), -20.0, dtype=torch.float64)
    b, a, gj, gi = t.indices[0]
    assert len(set(zip(b.tolist(), a.tolist(), gj.tolist(), gi.tolist()))) == len(b)
    for k in range(len(b)):
        txy = t.tbox[0][k, :2]
        twh = t.tbox[0][k, 2:]
        sxy = (txy + 0.5) / 2
        swh = torch.sqrt(twh / t.anchors[0][k]) / 2
        s = torch.cat((sxy, swh))
        raw[b[k], a[k], gj[k], gi[k], :4] = torch.log(s / (1 - s))
        raw[b[k], a[k], gj[k], gi[k], 4] = 20.0
        raw[b[k], a[k], gj[k], gi[k], 5 + int(t.tcls[0][k])] = 20.0
    br = detection_loss([raw], t, LossConfig().resolved(1, nc), nc)
    assert br.l_o.item() < 1e-3


@settings(max_examples=20, deadline=None)
@given(loc=st.floats(0, 2), obj=st.floats(0, 2), cls=st.floats(0, 2), k=st.floats(0, 3))
def test_loss_linear_in_lambdas(loc, obj, cls, k):
    raw, t = _fixture()
    base = detection_loss([raw], t, LossConfig(lambda_loc=loc, lambda_obj=obj, lambda_cls=cls).resolved(1, 3), 3)
    expect = loc * base.l_loc + obj * base.l_obj + cls * base.l_cls
    assert torch.allclose(base.l_o, expect, rtol=1e-12, atol=1e-15)
    scaled = detection_loss([raw], t, LossConfig(lambda_loc=loc, lambda_obj=k * obj,
                                                 lambda_cls=cls).resolved(1, 3), 3)
    assert torch.allclose(scaled.l_o - base.l_o, (k - 1) * obj * base.l_obj, rtol=1e-9, atol=1e-12)


def test_doubling_lambda_obj():
    raw, t = _fixture()
    a = detection_loss([raw], t, LossConfig(lambda_obj=1.0).resolved(1, 3), 3)
    b = detection_loss([raw], t, LossConfig(lambda_obj=2.0).resolved(1, 3), 3)
    assert torch.allclose(b.l_o - a.l_o, a.l_obj, rtol=1e-12)


def test_total_loss_examples():
    cfg = LossConfig()
    assert total_loss(torch.tensor(0.3), torch.tensor(0.2), cfg).item() == pytest.approx(0.5)
    cfg0 = LossConfig(c1=1.7, c2=0.0)
    assert total_loss(torch.tensor(0.3), torch.tensor(0.2), cfg0).item() == pytest.approx(1.7 * 0.3)


def test_total_loss_gradient_linearity():
    torch.manual_seed(0)
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    l_o = (w**2).sum()
    l_s = (w.sin()).sum()
    cfg = LossConfig(c1=0.7, c2=1.3)
    (g_total,) = torch.autograd.grad(total_loss(l_o, l_s, cfg), w, retain_graph=True)
    (g_o,) = torch.autograd.grad(l_o, w, retain_graph=True)
    (g_s,) = torch.autograd.grad(l_s, w)
    assert torch.allclose(g_total, 0.7 * g_o + 1.3 * g_s, atol=1e-12)


def test_loss_defaults_resolved():
    r1 = LossConfig().resolved(1, 8)
    assert r1.lambda_cls == pytest.approx(0.05) and r1.layer_weights_b == [1.0]
    r3 = LossConfig().resolved(3, 8)
    assert r3.layer_weights_b == [4.0, 1.0, 0.4] and r3.layer_weights_a == [1.0] * 3
    with pytest.raises(ValueError):
        LossConfig(layer_weights_b=[1.0, 2.0]).resolved(1, 8)
    with pytest.raises(ValueError):
        LossConfig(lambda_loc=-1).resolved(1, 8)


def test_non_finite_logits_raise():
    raw, t = _fixture()
    raw[1, 0, 0, 0, 4] = float("nan")
    with pytest.raises(FloatingPointError, match="batch ids \\[1\\]"):
        detection_loss([raw], t, LossConfig().resolved(1, 3), 3)


def test_ciou_identical_boxes_and_alpha_mode():
    b = torch.tensor([[5.0, 5.0, 2.0, 3.0]], dtype=torch.float64)
    assert bbox_ciou(b, b).item() == pytest.approx(1.0, abs=1e-6)
    p = torch.tensor([[5.2, 4.9, 2.5, 2.0]], dtype=torch.float64)
    assert torch.allclose(bbox_ciou(p, b), bbox_ciou(p, b, alpha_grad=True))


def test_detection_loss_gradient_check():
    assert loss_gradient_error() < 1e-4


def test_kmeans_anchors():
    rng = np.random.default_rng(0)
    wh = np.concatenate([rng.normal(10, 1, (30, 2)), rng.normal(40, 2, (30, 2)), rng.normal(90, 3, (30, 2))])
    k = kmeans_anchors(wh, 3, seed=1)
    assert k.shape == (3, 2)
    assert np.all(np.diff(k.prod(1)) > 0)
    assert np.allclose(k, kmeans_anchors(wh, 3, seed=1))
    assert np.allclose(k[:, 0], [10, 40, 90], atol=3)
    with pytest.raises(ValueError):
        kmeans_anchors(wh[:2], 3)
