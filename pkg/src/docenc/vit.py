"""Minimal vision-transformer encoder and token-grid utilities.

Patchify / embed / pre-norm attention blocks, plus the bilinear token-grid
resampling used when two encoders disagree on patch counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheckpointIncompatibilityError, GeometryError
from .numkernel import (
    ParamStore,
    Rng,
    Tensor,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

POS_EMBED_STD = 0.02


def weight_init(rng: "Rng", shape) -> "np.ndarray":
    """Fan-in scaled normal init for weight matrices."""
    return rng.normal(shape, shape[0] ** -0.5)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    channels: int = 1

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.dim, self.depth,
               self.heads, self.mlp_ratio, self.channels) <= 0:
            raise GeometryError("all ViTConfig fields must be positive")
        if self.image_size % self.patch_size:
            raise GeometryError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise GeometryError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TokenGrid:
    """Patch-feature sequence with explicit (rows, cols, dim) geometry."""

    rows: int
    cols: int
    dim: int
    data: Tensor

    def __post_init__(self):
        if self.data.shape != (self.rows * self.cols, self.dim):
            raise GeometryError(
                f"TokenGrid data {self.data.shape} does not match "
                f"{self.rows}x{self.cols} tokens of dim {self.dim}")

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols


def patchify(image, patch_size: int) -> np.ndarray:
    """Split an HxWxC (or HxW) image into row-major patch rows [N, p*p*C]."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise GeometryError(
            f"image {h}x{w} not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (img.reshape(gh, patch_size, gw, patch_size, c)
                  .transpose(0, 2, 1, 3, 4)
                  .reshape(gh * gw, patch_size * patch_size * c))
    return patches


def unpatchify(patches: np.ndarray, patch_size: int, rows: int, cols: int,
               channels: int = 1) -> np.ndarray:
    p = np.asarray(patches, dtype=np.float32)
    img = (p.reshape(rows, cols, patch_size, patch_size, channels)
             .transpose(0, 2, 1, 3, 4)
             .reshape(rows * patch_size, cols * patch_size, channels))
    return img


def param_names(config: ViTConfig, prefix: str = "") -> list[str]:
    names = [f"{prefix}patch_embed.w", f"{prefix}patch_embed.b", f"{prefix}pos_embed"]
    for i in range(config.depth):
        b = f"{prefix}blocks.{i}."
        names += [b + "ln1.g", b + "ln1.b",
                  b + "attn.wq", b + "attn.bq", b + "attn.wk", b + "attn.bk",
                  b + "attn.wv", b + "attn.bv", b + "attn.wo", b + "attn.bo",
                  b + "ln2.g", b + "ln2.b",
                  b + "mlp.w1", b + "mlp.b1", b + "mlp.w2", b + "mlp.b2"]
    names += [f"{prefix}final_ln.g", f"{prefix}final_ln.b"]
    return names


def param_count(config: ViTConfig) -> int:
    d, hid = config.dim, config.dim * config.mlp_ratio
    total = config.patch_dim * d + d            # patch embed
    total += config.n_patches * d               # pos embed
    per_block = (2 * d                          # ln1
                 + 4 * (d * d + d)              # attn projections
                 + 2 * d                        # ln2
                 + d * hid + hid + hid * d + d)  # mlp
    total += config.depth * per_block
    total += 2 * d                              # final ln
    return total


def init_blocks(store: ParamStore, dim: int, depth: int, mlp_ratio: int,
                rng: Rng, prefix: str = "") -> None:
    """Initialize ``blocks.*`` and ``final_ln.*`` entries under ``prefix``."""
    hid = dim * mlp_ratio

    def w(name, shape):
        store[name] = Tensor(weight_init(rng, shape), requires_grad=True)

    def zeros(name, shape):
        store[name] = Tensor(np.zeros(shape, np.float32), requires_grad=True)

    def ones(name, shape):
        store[name] = Tensor(np.ones(shape, np.float32), requires_grad=True)

    for i in range(depth):
        b = f"{prefix}blocks.{i}."
        ones(b + "ln1.g", (dim,)); zeros(b + "ln1.b", (dim,))
        for proj in ("q", "k", "v", "o"):
            w(b + f"attn.w{proj}", (dim, dim))
            zeros(b + f"attn.b{proj}", (dim,))
        ones(b + "ln2.g", (dim,)); zeros(b + "ln2.b", (dim,))
        w(b + "mlp.w1", (dim, hid)); zeros(b + "mlp.b1", (hid,))
        w(b + "mlp.w2", (hid, dim)); zeros(b + "mlp.b2", (dim,))
    ones(f"{prefix}final_ln.g", (dim,)); zeros(f"{prefix}final_ln.b", (dim,))


def init_params(config: ViTConfig, rng: Rng, prefix: str = "") -> ParamStore:
    """Deterministic parameter initialization for a given seed."""
    d = config.dim
    store = ParamStore(metadata={
        "seed": str(rng.seed),
        "config": repr(config),
    })
    store[f"{prefix}patch_embed.w"] = Tensor(
        weight_init(rng, (config.patch_dim, d)), requires_grad=True)
    store[f"{prefix}patch_embed.b"] = Tensor(
        np.zeros(d, np.float32), requires_grad=True)
    store[f"{prefix}pos_embed"] = Tensor(
        rng.normal((config.n_patches, d), POS_EMBED_STD), requires_grad=True)
    init_blocks(store, d, config.depth, config.mlp_ratio, rng, prefix)
    return store


def _require(params: ParamStore, config: ViTConfig, prefix: str) -> None:
    missing = [n for n in param_names(config, prefix) if n not in params]
    if missing:
        raise CheckpointIncompatibilityError(
            f"checkpoint incompatible with config; missing parameters: {missing}")


def attention(x: Tensor, params: ParamStore, prefix: str, heads: int,
              causal: bool = False) -> Tensor:
    n, d = x.shape
    dh = d // heads
    q = matmul(x, params[prefix + "wq"]) + params[prefix + "bq"]
    k = matmul(x, params[prefix + "wk"]) + params[prefix + "bk"]
    v = matmul(x, params[prefix + "wv"]) + params[prefix + "bv"]
    q = q.reshape(n, heads, dh).transpose(1, 0, 2)
    k = k.reshape(n, heads, dh).transpose(1, 0, 2)
    v = v.reshape(n, heads, dh).transpose(1, 0, 2)
    scores = matmul(q, k.transpose(0, 2, 1)) * (dh ** -0.5)
    if causal:
        mask = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
        scores = scores + Tensor(mask)
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v).transpose(1, 0, 2).reshape(n, d)
    return matmul(out, params[prefix + "wo"]) + params[prefix + "bo"]


def transformer_block(x: Tensor, params: ParamStore, prefix: str, heads: int,
                      causal: bool = False) -> Tensor:
    h = layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    x = x + attention(h, params, prefix + "attn.", heads, causal=causal)
    h = layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    h = gelu(matmul(h, params[prefix + "mlp.w1"]) + params[prefix + "mlp.b1"])
    return x + matmul(h, params[prefix + "mlp.w2"]) + params[prefix + "mlp.b2"]


def encode_patches(patches: Tensor | np.ndarray, params: ParamStore,
                   config: ViTConfig, visible_idx: np.ndarray | None = None,
                   prefix: str = "") -> Tensor:
    """Encode patch rows; positional embeddings gathered by original index."""
    _require(params, config, prefix)
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if visible_idx is None:
        visible_idx = np.arange(x.shape[0])
    visible_idx = np.asarray(visible_idx, dtype=np.int64)
    if x.shape[0] != visible_idx.shape[0]:
        raise GeometryError(
            f"{x.shape[0]} patch rows but {visible_idx.shape[0]} position indices")
    pos = gather_rows(params[f"{prefix}pos_embed"], visible_idx)
    x = matmul(x, params[f"{prefix}patch_embed.w"]) + params[f"{prefix}patch_embed.b"] + pos
    for i in range(config.depth):
        x = transformer_block(x, params, f"{prefix}blocks.{i}.", config.heads)
    return layer_norm(x, params[f"{prefix}final_ln.g"], params[f"{prefix}final_ln.b"])


def encode(image, params: ParamStore, config: ViTConfig,
           prefix: str = "") -> TokenGrid:
    """Encode a full image into a rows x cols token grid."""
    patches = patchify(image, config.patch_size)
    if patches.shape[0] != config.n_patches:
        raise GeometryError(
            f"image yields {patches.shape[0]} patches, config expects {config.n_patches}")
    tokens = encode_patches(patches, params, config, prefix=prefix)
    side = config.grid_side
    return TokenGrid(side, side, config.dim, tokens)


def _bilinear_matrix(rows: int, cols: int, tr: int, tc: int) -> np.ndarray:
    """Resampling weights [tr*tc, rows*cols] with half-pixel sample centers
    clamped at the edges (no corner alignment)."""
    w = np.zeros((tr * tc, rows * cols), dtype=np.float32)
    for r in range(tr):
        sy = (r + 0.5) * rows / tr - 0.5
        sy = min(max(sy, 0.0), rows - 1.0)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, rows - 1)
        wy = sy - y0
        for c in range(tc):
            sx = (c + 0.5) * cols / tc - 0.5
            sx = min(max(sx, 0.0), cols - 1.0)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, cols - 1)
            wx = sx - x0
            t = r * tc + c
            w[t, y0 * cols + x0] += (1 - wy) * (1 - wx)
            w[t, y0 * cols + x1] += (1 - wy) * wx
            w[t, y1 * cols + x0] += wy * (1 - wx)
            w[t, y1 * cols + x1] += wy * wx
    return w


def interpolate_tokens(grid: TokenGrid, target_rows: int, target_cols: int) -> TokenGrid:
    """Bilinear resampling of the token grid's feature map, per channel."""
    if target_rows <= 0 or target_cols <= 0:
        raise GeometryError("target grid dimensions must be positive")
    if (target_rows, target_cols) == (grid.rows, grid.cols):
        return TokenGrid(grid.rows, grid.cols, grid.dim, grid.data)
    weights = _bilinear_matrix(grid.rows, grid.cols, target_rows, target_cols)
    out = matmul(Tensor(weights), grid.data)
    return TokenGrid(target_rows, target_cols, grid.dim, out)
