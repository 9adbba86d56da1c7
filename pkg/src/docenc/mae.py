"""Stage-1 self-supervised pretraining: random masking and asymmetric
encoder-decoder reconstruction with both loss variants (normalized target
and raw pixel target)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMaskError, DivergenceError, GeometryError
from .numkernel import (
    ParamStore,
    Rng,
    Tensor,
    gather_rows,
    matmul,
    mse,
    scatter_rows,
    layer_norm,
)
from .optim import AdamW, lr_at_step
from .vit import (
    ViTConfig,
    encode_patches,
    init_blocks,
    init_params,
    patchify,
    transformer_block,
    weight_init,
)

NORM_EPS = 1e-6  # variance guard in the normalized reconstruction target


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into masked and visible sets."""

    n_patches: int
    masked: tuple[int, ...]
    visible: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        m, v = set(self.masked), set(self.visible)
        if m & v or m | v != set(range(self.n_patches)):
            raise DegenerateMaskError("masked/visible sets must partition the patches")
        if not m or not v:
            raise DegenerateMaskError("mask plan must leave both sets non-empty")

    @property
    def masked_idx(self) -> np.ndarray:
        return np.asarray(self.masked, dtype=np.int64)

    @property
    def visible_idx(self) -> np.ndarray:
        return np.asarray(self.visible, dtype=np.int64)


@dataclass(frozen=True)
class MAEDecoderConfig:
    dim: int = 32
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise GeometryError("decoder depth must be >= 1")
        if self.dim % self.heads:
            raise GeometryError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class MAETrainConfig:
    mask_ratio: float = 0.75
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 5
    warmup_epochs: int = 1
    batch_size: int = 16
    schedule: str = "cosine"
    loss_kind: str = "pixel"  # "pixel" or "normalized"
    # paper-scale recipe, echoed into checkpoint metadata but not used here
    reference_recipe: dict = field(default_factory=lambda: {
        "batch_size": 4096, "learning_rate": 1e-5, "epochs": 25,
        "warmup_epochs": 5, "weight_decay": 0.05, "mask_ratio": 0.75,
        "schedule": "cosine"})

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise DegenerateMaskError("mask ratio must lie strictly in (0, 1)")
        if self.warmup_epochs > self.epochs:
            raise GeometryError("warmup epochs cannot exceed total epochs")


def sample_mask(n_patches: int, ratio: float, rng: Rng) -> MaskPlan:
    """Uniform random masked subset of round(ratio * N) patches."""
    if n_patches < 2:
        raise DegenerateMaskError("need at least 2 patches to mask")
    k = int(round(ratio * n_patches))
    if k <= 0 or k >= n_patches:
        raise DegenerateMaskError(
            f"ratio {ratio} on {n_patches} patches masks {k} of them")
    perm = rng.permutation(n_patches)
    masked = tuple(sorted(int(i) for i in perm[:k]))
    visible = tuple(sorted(int(i) for i in perm[k:]))
    return MaskPlan(n_patches, masked, visible, ratio)


def normalized_target(patches) -> np.ndarray:
    """Per-patch standardized target: (x - mean) / sqrt(var + 1e-6)."""
    x = np.asarray(patches.data if isinstance(patches, Tensor) else patches,
                   dtype=np.float32)
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float32)
    return ((x - mu) / np.sqrt(var + np.float32(NORM_EPS))).astype(np.float32)


def mae_loss_pixel(pred: Tensor, patches, plan: MaskPlan) -> Tensor:
    """Mean squared error against raw pixels, masked patches only."""
    target = np.asarray(patches.data if isinstance(patches, Tensor) else patches,
                        dtype=np.float32)
    if pred.shape != target.shape:
        raise GeometryError(f"pred {pred.shape} vs patches {target.shape}")
    if pred.shape[0] != plan.n_patches:
        raise GeometryError(
            f"plan covers {plan.n_patches} patches but got {pred.shape[0]}")
    idx = plan.masked_idx
    return mse(gather_rows(pred, idx), Tensor(target[idx]))


def mae_loss_normalized(pred: Tensor, patches, plan: MaskPlan) -> Tensor:
    """Same as the pixel loss, but against the per-patch normalized target."""
    return mae_loss_pixel(pred, normalized_target(patches), plan)


def init_decoder_params(enc_config: ViTConfig, dec_config: MAEDecoderConfig,
                        rng: Rng) -> ParamStore:
    d = dec_config.dim
    store = ParamStore(metadata={"seed": str(rng.seed), "role": "decoder"})
    store["decoder.embed.w"] = Tensor(weight_init(rng, (enc_config.dim, d)),
                                      requires_grad=True)
    store["decoder.embed.b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
    store["decoder.mask_token"] = Tensor(rng.normal((d,), 0.02), requires_grad=True)
    store["decoder.pos_embed"] = Tensor(rng.normal((enc_config.n_patches, d), 0.02),
                                        requires_grad=True)
    init_blocks(store, d, dec_config.depth, 4, rng.child("blocks"),
                prefix="decoder.")
    store["decoder.pred.w"] = Tensor(weight_init(rng, (d, enc_config.patch_dim)),
                                     requires_grad=True)
    store["decoder.pred.b"] = Tensor(np.zeros(enc_config.patch_dim, np.float32),
                                     requires_grad=True)
    return store


def mae_forward(image, params: ParamStore, enc_config: ViTConfig,
                dec_config: MAEDecoderConfig, plan: MaskPlan) -> Tensor:
    """Reconstruct all N patches from the visible subset.

    The encoder sees only visible patches; the decoder restores the original
    ordering with a learned mask token at masked slots plus decoder
    positional embeddings.
    """
    patches = patchify(image, enc_config.patch_size)
    if patches.shape[0] != plan.n_patches or plan.n_patches != enc_config.n_patches:
        raise GeometryError(
            f"plan for {plan.n_patches} patches but image has {patches.shape[0]} "
            f"and config expects {enc_config.n_patches}")
    vis_idx = plan.visible_idx
    tokens = encode_patches(patches[vis_idx], params, enc_config, visible_idx=vis_idx)
    x = matmul(tokens, params["decoder.embed.w"]) + params["decoder.embed.b"]
    x = scatter_rows(x, vis_idx, params["decoder.mask_token"], plan.n_patches)
    x = x + params["decoder.pos_embed"]
    for i in range(dec_config.depth):
        x = transformer_block(x, params, f"decoder.blocks.{i}.", dec_config.heads)
    x = layer_norm(x, params["decoder.final_ln.g"], params["decoder.final_ln.b"])
    return matmul(x, params["decoder.pred.w"]) + params["decoder.pred.b"]


def train_mae(dataset, enc_config: ViTConfig, dec_config: MAEDecoderConfig,
              train_config: MAETrainConfig, rng: Rng,
              params: ParamStore | None = None):
    """Run the masked-reconstruction training loop.

    Returns (encoder-only ParamStore, loss records [(step, loss, lr)]).
    Raises DivergenceError (with the step index) on a non-finite loss, so
    objective-induced blowups are observable rather than silently clipped.
    """
    images = [np.asarray(im, dtype=np.float32) for im in dataset]
    if not images:
        raise GeometryError("dataset is empty")
    if params is None:
        params = init_params(enc_config, rng.child("encoder"))
        decoder = init_decoder_params(enc_config, dec_config, rng.child("decoder"))
        for name, t in decoder.items():
            params[name] = t
    loss_fn = mae_loss_pixel if train_config.loss_kind == "pixel" else mae_loss_normalized

    steps_per_epoch = max(1, len(images) // train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    warmup_steps = train_config.warmup_epochs * steps_per_epoch
    opt = AdamW(params.tensors(), lr=train_config.learning_rate,
                weight_decay=train_config.weight_decay)
    mask_rng = rng.child("masks")
    order_rng = rng.child("batches")

    records: list[tuple[int, float, float]] = []
    step = 0
    for _ in range(train_config.epochs):
        order = order_rng.permutation(len(images))
        for b in range(steps_per_epoch):
            batch = order[b * train_config.batch_size:(b + 1) * train_config.batch_size]
            if batch.size == 0:
                continue
            lr = lr_at_step(step, total_steps, train_config.learning_rate,
                            warmup_steps, train_config.schedule)
            opt.zero_grad()
            total = None
            for i in batch:
                img = images[i]
                plan = sample_mask(enc_config.n_patches, train_config.mask_ratio,
                                   mask_rng.child(f"s{step}i{i}"))
                pred = mae_forward(img, params, enc_config, dec_config, plan)
                loss = loss_fn(pred, patchify(img, enc_config.patch_size), plan)
                total = loss if total is None else total + loss
            total = total * (1.0 / batch.size)
            value = float(total.data)
            if not np.isfinite(value):
                raise DivergenceError(step)
            total.backward()
            opt.step(lr=lr)
            records.append((step, value, lr))
            step += 1

    encoder = params.filtered(lambda n: not n.startswith("decoder."))
    encoder.metadata.update({
        "stage": "mae",
        "seed": str(rng.seed),
        "loss_kind": train_config.loss_kind,
        "config": repr(enc_config),
        "reference_recipe": repr(train_config.reference_recipe),
    })
    return encoder, records
