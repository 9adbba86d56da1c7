"""Finetunable task heads: attention pooling, bbox regression, per-patch
segmentation, classification, and box metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, GeometryError
from .numkernel import (
    ParamStore,
    Rng,
    Tensor,
    cross_entropy,
    gelu,
    matmul,
    maximum,
    minimum,
    select,
    smooth_l1,
    softmax,
    stack_scalars,
)
from .optim import AdamW
from .vit import TokenGrid, weight_init


@dataclass(frozen=True)
class BBox:
    """Box in normalized [0, 1] coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not 0.0 <= v <= 1.0:
                raise GeometryError(f"coordinate {v} outside [0, 1]")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise GeometryError("box corners out of order")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass
class SegLogits:
    """Per-patch class logits; class K (the last one) is background."""

    rows: int
    cols: int
    n_classes: int  # K + 1 including background
    data: Tensor

    def __post_init__(self):
        if self.data.shape != (self.rows * self.cols, self.n_classes):
            raise GeometryError("segmentation logits shape mismatch")


# --- parameter initialization --------------------------------------------------

def init_pool(dim: int, rng: Rng) -> ParamStore:
    store = ParamStore(metadata={"role": "attention_pool", "seed": str(rng.seed)})
    store["pool.q"] = Tensor(rng.normal((dim,), dim ** -0.5), requires_grad=True)
    store["pool.wv"] = Tensor(weight_init(rng, (dim, dim)), requires_grad=True)
    store["pool.bv"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)
    return store


def _init_mlp(store: ParamStore, prefix: str, d_in: int, hidden: int,
              d_out: int, rng: Rng) -> None:
    store[prefix + "w1"] = Tensor(weight_init(rng, (d_in, hidden)), requires_grad=True)
    store[prefix + "b1"] = Tensor(np.zeros(hidden, np.float32), requires_grad=True)
    store[prefix + "w2"] = Tensor(weight_init(rng, (hidden, d_out)), requires_grad=True)
    store[prefix + "b2"] = Tensor(np.zeros(d_out, np.float32), requires_grad=True)


def init_bbox_head(dim: int, rng: Rng, hidden: int | None = None) -> ParamStore:
    store = init_pool(dim, rng.child("pool"))
    store.metadata["role"] = "bbox_head"
    _init_mlp(store, "bbox.", dim, hidden or dim, 4, rng.child("mlp"))
    return store


def init_seg_head(dim: int, n_classes: int, rng: Rng,
                  hidden: int | None = None) -> ParamStore:
    store = ParamStore(metadata={"role": "seg_head", "seed": str(rng.seed)})
    _init_mlp(store, "seg.", dim, hidden or dim, n_classes, rng)
    return store


def init_class_head(dim: int, n_classes: int, rng: Rng,
                    hidden: int | None = None) -> ParamStore:
    store = init_pool(dim, rng.child("pool"))
    store.metadata["role"] = "class_head"
    _init_mlp(store, "cls.", dim, hidden or dim, n_classes, rng.child("mlp"))
    return store


# --- heads ---------------------------------------------------------------------

def attention_scores(grid: TokenGrid, params: ParamStore) -> Tensor:
    return matmul(grid.data, params["pool.q"])


def attention_pool(grid: TokenGrid, params: ParamStore) -> Tensor:
    """Learned query attends over tokens; softmax-weighted value projection."""
    if grid.n_tokens == 0:
        raise GeometryError("cannot pool an empty token grid")
    weights = softmax(attention_scores(grid, params), axis=-1)
    values = matmul(grid.data, params["pool.wv"]) + params["pool.bv"]
    return matmul(weights, values)


def _mlp(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    h = gelu(matmul(x, params[prefix + "w1"]) + params[prefix + "b1"])
    return matmul(h, params[prefix + "w2"]) + params[prefix + "b2"]


def predict_bbox_tensor(pooled: Tensor, params: ParamStore) -> Tensor:
    """Differentiable 4-vector (x0, y0, x1, y1): sigmoid-squashed outputs
    sorted per axis so the corner ordering always holds."""
    raw = _mlp(pooled, params, "bbox.").sigmoid()
    sx0, sy0, sx1, sy1 = (select(raw, i) for i in range(4))
    return stack_scalars([
        minimum(sx0, sx1), minimum(sy0, sy1),
        maximum(sx0, sx1), maximum(sy0, sy1),
    ])


def predict_bbox(pooled: Tensor, params: ParamStore) -> BBox:
    v = predict_bbox_tensor(pooled, params).data
    return BBox(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


def predict_segmentation(grid: TokenGrid, params: ParamStore,
                         n_classes: int) -> SegLogits:
    """Independent per-token MLP producing rows x cols x (K+1) logits."""
    logits = _mlp(grid.data, params, "seg.")
    return SegLogits(grid.rows, grid.cols, n_classes, logits)


def predict_class(pooled: Tensor, params: ParamStore) -> Tensor:
    return _mlp(pooled, params, "cls.")


def box_metrics(pred: BBox, gold: BBox) -> dict:
    """IoU plus the center-hit criterion (gold center inside the predicted
    box, boundary inclusive)."""
    ix0, iy0 = max(pred.x0, gold.x0), max(pred.y0, gold.y0)
    ix1, iy1 = min(pred.x1, gold.x1), min(pred.y1, gold.y1)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = pred.area + gold.area - inter
    iou = inter / union if union > 0 else 0.0
    cx, cy = gold.center
    center_hit = pred.x0 <= cx <= pred.x1 and pred.y0 <= cy <= pred.y1
    return {"iou": iou, "center_hit": center_hit}


# --- toy finetuning loops --------------------------------------------------------

def finetune(feature_fn, head: ParamStore, loss_of_sample, samples,
             trainable_stores, steps: int, lr: float = 3e-3,
             batch_size: int = 8, rng: Rng | None = None,
             weight_decay: float = 1e-4):
    """Generic head-finetuning loop.

    ``feature_fn(image) -> TokenGrid`` builds the (possibly fused) features;
    ``loss_of_sample(grid, sample) -> Tensor`` scores one sample. Returns
    per-step loss records.
    """
    rng = rng or Rng(0)
    opt = AdamW.from_stores([head, *trainable_stores], lr=lr,
                            weight_decay=weight_decay)
    order_rng = rng.child("order")
    records = []
    n = len(samples)
    for step in range(steps):
        idx = order_rng.permutation(n)[:batch_size]
        opt.zero_grad()
        total = None
        for i in idx:
            grid = feature_fn(samples[i][0])
            loss = loss_of_sample(grid, samples[i])
            total = loss if total is None else total + loss
        total = total * (1.0 / len(idx))
        value = float(total.data)
        if not np.isfinite(value):
            raise DivergenceError(step)
        total.backward()
        opt.step()
        records.append((step, value))
    return records


def bbox_sample_loss(grid: TokenGrid, sample, head: ParamStore) -> Tensor:
    pooled = attention_pool(grid, head)
    pred = predict_bbox_tensor(pooled, head)
    return smooth_l1(pred, Tensor(np.asarray(sample[1], np.float32)))


def seg_sample_loss(grid: TokenGrid, sample, head: ParamStore,
                    n_classes: int) -> Tensor:
    logits = predict_segmentation(grid, head, n_classes)
    return cross_entropy(logits.data, np.asarray(sample[1], np.int64))


def class_sample_loss(grid: TokenGrid, sample, head: ParamStore) -> Tensor:
    pooled = attention_pool(grid, head)
    logits = predict_class(pooled, head)
    return cross_entropy(logits.reshape(1, -1), [int(sample[1])])
