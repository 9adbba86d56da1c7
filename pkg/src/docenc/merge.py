"""Weight-space merging of aligned encoders.

Three routes: plain parameter averaging, diagonal-Fisher importance
weighting, and the learned-coefficient distillation merge in which
per-tensor coefficients are optimized so the merged encoder's features
match every teacher's features on unlabeled probe images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointIncompatibilityError,
    DivergenceError,
    EvaluationError,
    GeometryError,
    UsageError,
)
from .numkernel import ParamStore, Rng, Tensor, mse, select
from .optim import AdamW
from .vit import TokenGrid, ViTConfig, encode

FISHER_EPS = 1e-12


@dataclass
class TeacherSet:
    """n checkpoints with identical name/shape signatures."""

    stores: list[ParamStore]
    config: ViTConfig

    def __post_init__(self):
        if not self.stores:
            raise UsageError("need at least one teacher")
        ref = self.stores[0]
        for k, other in enumerate(self.stores[1:], start=1):
            if other.names() != ref.names():
                extra = set(other.names()) ^ set(ref.names())
                raise CheckpointIncompatibilityError(
                    f"teacher {k} signature differs on parameters {sorted(extra)}")
            for name, t in ref.items():
                if other[name].shape != t.shape:
                    raise CheckpointIncompatibilityError(
                        f"teacher {k} parameter {name!r} has shape "
                        f"{other[name].shape}, expected {t.shape}")

    @property
    def n(self) -> int:
        return len(self.stores)

    def names(self) -> list[str]:
        return self.stores[0].names()


class MergeCoefficients:
    """Per-parameter-tensor, per-teacher coefficients in (0, 1).

    Raw learnable scalars are passed through a sigmoid, so the box
    constraint holds by construction and optimization stays smooth.
    """

    def __init__(self, names: list[str], n_teachers: int,
                 init_alpha: float | None = None):
        if n_teachers < 1:
            raise UsageError("need at least one teacher")
        alpha = 1.0 / n_teachers if init_alpha is None else float(init_alpha)
        if alpha <= 0.0:
            raw0 = -math.inf
        elif alpha >= 1.0:
            raw0 = math.inf  # sigmoid saturates to exactly 1.0
        else:
            raw0 = math.log(alpha / (1.0 - alpha))  # logit
        self.n_teachers = n_teachers
        self.raw: dict[str, Tensor] = {
            name: Tensor(np.full(n_teachers, raw0, np.float32), requires_grad=True)
            for name in names
        }

    def names(self) -> list[str]:
        return sorted(self.raw)

    def alphas(self) -> dict[str, np.ndarray]:
        return {name: (1.0 / (1.0 + np.exp(-t.data))).astype(np.float32)
                for name, t in self.raw.items()}

    def tensors(self) -> list[Tensor]:
        return [self.raw[n] for n in self.names()]

    def to_json(self) -> str:
        return json.dumps({name: [float(a) for a in arr]
                           for name, arr in sorted(self.alphas().items())})

    @classmethod
    def from_json(cls, text: str) -> "MergeCoefficients":
        payload = json.loads(text)
        names = sorted(payload)
        n = len(payload[names[0]])
        out = cls(names, n)
        for name in names:
            a = np.clip(np.asarray(payload[name], np.float64), 1e-7, 1 - 1e-7)
            out.raw[name] = Tensor(np.log(a / (1 - a)).astype(np.float32),
                                   requires_grad=True)
        return out


def _check_coverage(coeffs: MergeCoefficients, teachers: TeacherSet) -> None:
    if coeffs.names() != teachers.names() or coeffs.n_teachers != teachers.n:
        missing = set(teachers.names()) ^ set(coeffs.names())
        raise CheckpointIncompatibilityError(
            f"coefficients do not cover the teacher signature; mismatch on "
            f"{sorted(missing) or 'teacher count'}")


def materialize(coeffs: MergeCoefficients, teachers: TeacherSet,
                differentiable: bool = False) -> ParamStore:
    """Per-name weighted sum of teacher parameters; teachers untouched.

    With ``differentiable`` the merged tensors stay connected to the raw
    coefficient tensors so distillation gradients reach them.
    """
    _check_coverage(coeffs, teachers)
    merged = ParamStore(metadata={"stage": "merge", "method": "learned",
                                  "n_teachers": str(teachers.n)})
    if differentiable:
        for name in teachers.names():
            alpha = coeffs.raw[name].sigmoid()
            acc = None
            for i, store in enumerate(teachers.stores):
                term = select(alpha, i) * Tensor(store[name].data)
                acc = term if acc is None else acc + term
            merged[name] = acc
    else:
        alphas = coeffs.alphas()
        for name in teachers.names():
            a = alphas[name]
            acc = np.zeros_like(teachers.stores[0][name].data)
            for i, store in enumerate(teachers.stores):
                acc = acc + a[i] * store[name].data
            merged[name] = Tensor(acc.astype(np.float32), requires_grad=True)
    return merged


def average_merge(teachers: TeacherSet) -> ParamStore:
    """Uniform 1/n weighted sum of the teacher parameters."""
    coeffs = MergeCoefficients(teachers.names(), teachers.n)
    merged = materialize(coeffs, teachers)
    merged.metadata["method"] = "average"
    return merged


def fisher_merge(teachers: TeacherSet, probe_batch, loss_fn) -> ParamStore:
    """Diagonal-Fisher importance-weighted merge.

    ``loss_fn(store, example) -> scalar Tensor`` must be differentiable
    w.r.t. the store's parameters. Per-element Fisher is the mean squared
    gradient over the probe batch; elements with zero total Fisher fall
    back to the plain average.
    """
    probe = list(probe_batch)
    if not probe:
        raise UsageError("probe batch is empty")
    fishers: list[dict[str, np.ndarray]] = []
    for store in teachers.stores:
        work = store.copy(requires_grad=True)
        acc = {name: np.zeros_like(t.data) for name, t in work.items()}
        for example in probe:
            for t in work.tensors():
                t.grad = None
            loss = loss_fn(work, example)
            loss.backward()
            for name, t in work.items():
                if t.grad is not None:
                    if not np.all(np.isfinite(t.grad)):
                        raise EvaluationError(
                            f"non-finite gradient for parameter {name!r}")
                    acc[name] += t.grad.astype(np.float64) ** 2
        fishers.append({name: (a / len(probe)) for name, a in acc.items()})

    merged = ParamStore(metadata={"stage": "merge", "method": "fisher",
                                  "n_teachers": str(teachers.n)})
    for name in teachers.names():
        thetas = [s[name].data.astype(np.float64) for s in teachers.stores]
        fs = [f[name] for f in fishers]
        total = sum(fs)
        weighted = sum(f * th for f, th in zip(fs, thetas)) / (total + FISHER_EPS)
        fallback = sum(thetas) / teachers.n
        out = np.where(total > 0.0, weighted, fallback)
        merged[name] = Tensor(out.astype(np.float32), requires_grad=True)
    return merged


def distill_loss(merged_grid: TokenGrid, teacher_grids: list[TokenGrid]) -> Tensor:
    """Average MSE between merged features and each teacher's features."""
    if not teacher_grids:
        raise UsageError("need at least one teacher grid")
    total = None
    for tg in teacher_grids:
        if (tg.rows, tg.cols, tg.dim) != (merged_grid.rows, merged_grid.cols,
                                          merged_grid.dim):
            raise GeometryError(
                f"grid geometry mismatch: merged {merged_grid.rows}x"
                f"{merged_grid.cols}x{merged_grid.dim} vs teacher "
                f"{tg.rows}x{tg.cols}x{tg.dim}")
        term = mse(merged_grid.data, tg.data.detach()
                   if tg.data.requires_grad else tg.data)
        total = term if total is None else total + term
    return total * (1.0 / len(teacher_grids))


@dataclass(frozen=True)
class MergeTrainConfig:
    learning_rate: float = 5e-2
    epochs: int = 20
    batch_size: int = 32
    # paper-scale recipe for reference: lr 1e-4, batch 32, 20 epochs
    reference_recipe: dict = field(default_factory=lambda: {
        "learning_rate": 1e-4, "batch_size": 32, "epochs": 20,
        "probe_images": 10_000})


def _default_forward(store: ParamStore, config: ViTConfig, image) -> TokenGrid:
    return encode(image, store, config)


def train_merge_coefficients(teachers: TeacherSet, images,
                             config: MergeTrainConfig,
                             rng: Rng, forward_fn=None):
    """Optimize merge coefficients on the distillation objective.

    Teachers stay frozen (verified by hash); only the coefficients move.
    Returns (MergeCoefficients, loss trace).
    """
    if teachers.n < 2:
        raise UsageError("learned merging needs at least two teachers")
    images = list(images)
    if not images:
        raise UsageError("no probe images")
    forward = forward_fn or (lambda store, img: _default_forward(store, teachers.config, img))
    hashes_before = [s.sha256() for s in teachers.stores]

    # teacher features are fixed targets; precompute once
    targets = [[forward(s, img) for s in teachers.stores] for img in images]
    coeffs = MergeCoefficients(teachers.names(), teachers.n)
    opt = AdamW(coeffs.tensors(), lr=config.learning_rate)
    order_rng = rng.child("order")

    trace: list[tuple[int, float]] = []
    step = 0
    for _ in range(config.epochs):
        order = order_rng.permutation(len(images))
        for b in range(max(1, len(images) // config.batch_size)):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            if batch.size == 0:
                continue
            opt.zero_grad()
            merged = materialize(coeffs, teachers, differentiable=True)
            total = None
            for i in batch:
                z = forward(merged, images[i])
                loss = distill_loss(z, targets[i])
                total = loss if total is None else total + loss
            total = total * (1.0 / batch.size)
            value = float(total.data)
            if not np.isfinite(value):
                raise DivergenceError(step)
            total.backward()
            opt.step()
            trace.append((step, value))
            step += 1

    hashes_after = [s.sha256() for s in teachers.stores]
    if hashes_before != hashes_after:
        raise EvaluationError("teacher parameters changed during merging")
    return coeffs, trace


def evaluate_distill(store: ParamStore, teachers: TeacherSet, images,
                     forward_fn=None) -> float:
    """Mean distillation loss of a merged candidate over a probe set."""
    forward = forward_fn or (lambda s, img: _default_forward(s, teachers.config, img))
    total = 0.0
    for img in images:
        z = forward(store, img)
        targets = [forward(s, img) for s in teachers.stores]
        total += float(distill_loss(z, targets).data)
    return total / len(list(images))


def merge_pipeline(teachers: TeacherSet, images, method: str,
                   config: MergeTrainConfig | None = None,
                   rng: Rng | None = None,
                   loss_fn=None) -> ParamStore:
    """Dispatch wrapper over the merge methods.

    ``none`` returns a copy of the first teacher (single-decoder baseline).
    """
    if method == "none":
        out = teachers.stores[0].copy()
        out.metadata.update({"stage": "merge", "method": "none"})
        return out
    if method == "average":
        return average_merge(teachers)
    if method == "fisher":
        if loss_fn is None:
            def loss_fn(store, img):
                grid = encode(img, store, teachers.config)
                return mse(grid.data, Tensor(np.zeros(grid.data.shape, np.float32)))
        return fisher_merge(teachers, images, loss_fn)
    if method == "learned":
        coeffs, _ = train_merge_coefficients(
            teachers, images, config or MergeTrainConfig(), rng or Rng(0))
        merged = materialize(coeffs, teachers)
        return merged
    raise UsageError(f"unknown merge method {method!r}; "
                     "expected none|average|fisher|learned")
