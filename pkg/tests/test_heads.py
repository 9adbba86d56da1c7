"""Task heads: attention pooling, bbox/segmentation/classification, metrics."""

import math

import numpy as np
import pytest

from docenc import data as synth
from docenc.errors import GeometryError
from docenc.heads import (
    BBox,
    SegLogits,
    attention_pool,
    bbox_sample_loss,
    box_metrics,
    class_sample_loss,
    finetune,
    init_bbox_head,
    init_class_head,
    init_pool,
    init_seg_head,
    predict_bbox,
    predict_bbox_tensor,
    predict_class,
    predict_segmentation,
    seg_sample_loss,
)
from docenc.numkernel import ParamStore, Rng, Tensor
from docenc.vit import TokenGrid, ViTConfig, encode, init_params

ENC = ViTConfig(image_size=32, patch_size=8, dim=32, depth=1, heads=4)


def _grid(values):
    arr = np.asarray(values, np.float32)
    return TokenGrid(1, arr.shape[0], arr.shape[1], Tensor(arr))


def _zero_pool(dim):
    pool = init_pool(dim, Rng(0))
    pool._entries["pool.q"] = Tensor(np.zeros(dim, np.float32))
    pool._entries["pool.wv"] = Tensor(np.eye(dim, dtype=np.float32))
    pool._entries["pool.bv"] = Tensor(np.zeros(dim, np.float32))
    return pool


# --- attention pooling ----------------------------------------------------------

def test_pool_single_token_returns_its_value_projection():
    pool = _zero_pool(3)
    grid = _grid([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(attention_pool(grid, pool).data, [1.0, 2.0, 3.0],
                               atol=1e-6)


def test_pool_uniform_scores_average_tokens():
    pool = _zero_pool(2)  # zero query -> uniform softmax
    grid = _grid([[0.0, 4.0], [2.0, 0.0], [4.0, 2.0]])
    np.testing.assert_allclose(attention_pool(grid, pool).data, [2.0, 2.0],
                               atol=1e-6)


def test_pool_hand_weights_quarter_three_quarters():
    pool = _zero_pool(1)
    pool._entries["pool.q"] = Tensor(np.ones(1, np.float32))
    grid = _grid([[0.0], [math.log(3.0)]])  # scores (0, ln 3) -> (0.25, 0.75)
    expect = 0.25 * 0.0 + 0.75 * math.log(3.0)
    assert attention_pool(grid, pool).data.item() == pytest.approx(expect,
                                                                   rel=1e-5)


def test_pool_empty_grid_rejected():
    pool = _zero_pool(2)
    with pytest.raises(GeometryError):
        attention_pool(TokenGrid(0, 0, 2, Tensor(np.zeros((0, 2), np.float32))),
                       pool)


# --- bbox head -------------------------------------------------------------------

def test_bbox_zero_head_predicts_center_point():
    head = init_bbox_head(4, Rng(0))
    for name in ("bbox.w1", "bbox.b1", "bbox.w2", "bbox.b2"):
        head._entries[name] = Tensor(np.zeros(head[name].shape, np.float32))
    pooled = Tensor(Rng(1).normal((4,)))
    pred = predict_bbox(pooled, head)  # all logits 0 -> sigmoid 0.5 everywhere
    assert (pred.x0, pred.y0, pred.x1, pred.y1) == (0.5, 0.5, 0.5, 0.5)


def test_bbox_prediction_invariants():
    for seed in range(10):
        head = init_bbox_head(8, Rng(seed))
        pred = predict_bbox(Tensor(Rng(seed + 100).normal((8,), 3.0)), head)
        assert 0.0 <= pred.x0 <= pred.x1 <= 1.0
        assert 0.0 <= pred.y0 <= pred.y1 <= 1.0


def test_bbox_tensor_matches_struct():
    head = init_bbox_head(8, Rng(3))
    pooled = Tensor(Rng(4).normal((8,)))
    v = predict_bbox_tensor(pooled, head).data
    pred = predict_bbox(pooled, head)
    np.testing.assert_allclose(v, [pred.x0, pred.y0, pred.x1, pred.y1],
                               atol=1e-7)


def test_bbox_validation():
    with pytest.raises(GeometryError):
        BBox(0.6, 0.0, 0.4, 1.0)
    with pytest.raises(GeometryError):
        BBox(0.0, 0.0, 1.5, 1.0)
    assert BBox(0.0, 0.0, 0.5, 0.5).area == pytest.approx(0.25)
    assert BBox(0.2, 0.4, 0.6, 0.8).center == pytest.approx((0.4, 0.6))


# --- segmentation / classification heads ----------------------------------------------

def test_seg_logits_shape_and_validation():
    head = init_seg_head(4, 3, Rng(0))
    grid = TokenGrid(2, 2, 4, Tensor(Rng(1).normal((4, 4))))
    seg = predict_segmentation(grid, head, 3)
    assert seg.data.shape == (4, 3)
    with pytest.raises(GeometryError):
        SegLogits(2, 2, 3, Tensor(np.zeros((4, 2), np.float32)))


def test_seg_zero_head_gives_chance_loss():
    head = init_seg_head(4, 3, Rng(0))
    for name in head.names():
        head._entries[name] = Tensor(np.zeros(head[name].shape, np.float32))
    grid = TokenGrid(2, 2, 4, Tensor(Rng(1).normal((4, 4))))
    loss = seg_sample_loss(grid, (None, [0, 1, 2, 0]), head, 3)
    assert loss.item() == pytest.approx(math.log(3.0), rel=1e-6)


def test_class_logits_shift_invariant_loss():
    head = init_class_head(4, 4, Rng(2))
    grid = TokenGrid(1, 2, 4, Tensor(Rng(3).normal((2, 4))))
    base = class_sample_loss(grid, (None, 1), head).item()
    head._entries["cls.b2"] = Tensor(head["cls.b2"].data + 7.0)
    shifted = class_sample_loss(grid, (None, 1), head).item()
    assert shifted == pytest.approx(base, rel=1e-5)


def test_predict_class_width():
    head = init_class_head(6, 5, Rng(0))
    out = predict_class(Tensor(Rng(1).normal((6,))), head)
    assert out.shape == (5,)


# --- box metrics -----------------------------------------------------------------------

def test_box_metrics_identical():
    b = BBox(0.1, 0.1, 0.6, 0.6)
    m = box_metrics(b, b)
    assert m["iou"] == pytest.approx(1.0)
    assert m["center_hit"]


def test_box_metrics_disjoint():
    m = box_metrics(BBox(0.0, 0.0, 0.2, 0.2), BBox(0.5, 0.5, 0.9, 0.9))
    assert m["iou"] == 0.0
    assert not m["center_hit"]


def test_box_metrics_hand_overlap_one_seventh():
    m = box_metrics(BBox(0.0, 0.0, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75))
    assert m["iou"] == pytest.approx(1.0 / 7.0)
    assert m["center_hit"]  # gold center (0.5, 0.5) on the boundary counts


def test_box_metrics_touching_boundary_inclusive():
    m = box_metrics(BBox(0.0, 0.0, 0.5, 1.0), BBox(0.0, 0.0, 1.0, 1.0))
    assert m["center_hit"]  # center x = 0.5 exactly on the predicted edge


# --- finetuning oracles -------------------------------------------------------------------

def _encoder_features(encoder):
    def features(image):
        return encode(image, encoder, ENC)
    return features


def test_bbox_finetune_oracle():
    rng = Rng(0)
    encoder = init_params(ENC, rng.child("enc"))
    head = init_bbox_head(ENC.dim, rng.child("head"))
    samples = [synth.square_localization_sample(rng.child(f"s{i}"), 32)
               for i in range(128)]
    records = finetune(_encoder_features(encoder), head,
                       lambda g, s: bbox_sample_loss(g, s, head),
                       samples, [encoder], steps=300, lr=3e-3, batch_size=16,
                       rng=rng.child("train"))
    assert records[-1][1] < records[0][1]
    eval_rng = rng.child("eval")
    ious = []
    for i in range(32):
        img, gold = synth.square_localization_sample(eval_rng.child(f"e{i}"), 32)
        pred = predict_bbox(attention_pool(encode(img, encoder, ENC), head), head)
        ious.append(box_metrics(pred, BBox(*[float(v) for v in gold]))["iou"])
    assert np.mean(ious) > 0.5


def test_seg_finetune_oracle():
    rng = Rng(1)
    encoder = init_params(ENC, rng.child("enc"))
    head = init_seg_head(ENC.dim, 3, rng.child("head"))
    samples = [synth.two_region_layout_sample(rng.child(f"s{i}"), 32, 8)
               for i in range(128)]
    finetune(_encoder_features(encoder), head,
             lambda g, s: seg_sample_loss(g, s, head, 3),
             samples, [encoder], steps=300, lr=3e-3, batch_size=16,
             rng=rng.child("train"))
    eval_rng = rng.child("eval")
    correct = total = 0
    for i in range(32):
        img, labels = synth.two_region_layout_sample(eval_rng.child(f"e{i}"), 32, 8)
        seg = predict_segmentation(encode(img, encoder, ENC), head, 3)
        pred = np.argmax(seg.data.data, axis=1)
        correct += int((pred == labels).sum())
        total += labels.size
    assert correct / total > 0.9


def test_class_finetune_oracle():
    rng = Rng(2)
    encoder = init_params(ENC, rng.child("enc"))
    head = init_class_head(ENC.dim, 4, rng.child("head"))
    samples = [synth.screenshot_class_sample(rng.child(f"s{i}"), 32)
               for i in range(128)]
    finetune(_encoder_features(encoder), head,
             lambda g, s: class_sample_loss(g, s, head),
             samples, [encoder], steps=300, lr=3e-3, batch_size=16,
             rng=rng.child("train"))
    eval_rng = rng.child("eval")
    hits = []
    for i in range(32):
        img, cls = synth.screenshot_class_sample(eval_rng.child(f"e{i}"), 32)
        logits = predict_class(attention_pool(encode(img, encoder, ENC), head),
                               head)
        hits.append(int(np.argmax(logits.data)) == cls)
    assert np.mean(hits) > 0.8
