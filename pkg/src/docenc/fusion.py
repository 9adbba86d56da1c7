"""Ensemble fusion: channel-wise concatenation of a frozen generalist
encoder's token features with the trainable specialist's features."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import FrozenViolationError
from .numkernel import ParamStore, Tensor, concat
from .vit import TokenGrid, ViTConfig, encode, interpolate_tokens


@dataclass
class FusedFeatures:
    """Concatenated token grid plus the widths of its two sources."""

    grid: TokenGrid
    gen_dim: int
    spec_dim: int

    def __post_init__(self):
        assert self.grid.dim == self.gen_dim + self.spec_dim


def fuse(gen: TokenGrid, spec: TokenGrid) -> FusedFeatures:
    """Concatenate generalist and specialist features per token.

    The specialist grid is bilinearly resampled to the generalist's
    geometry when the patch counts differ; generalist channels come first
    and pass through untouched.
    """
    if (spec.rows, spec.cols) != (gen.rows, gen.cols):
        spec = interpolate_tokens(spec, gen.rows, gen.cols)
    data = concat([gen.data, spec.data], axis=1)
    grid = TokenGrid(gen.rows, gen.cols, gen.dim + spec.dim, data)
    return FusedFeatures(grid, gen.dim, spec.dim)


class FrozenEncoder:
    """Generalist encoder whose parameters never receive updates.

    Freezing is enforced: the store is hash-stamped at construction and
    ``verify_frozen`` recomputes it, so a drifted store is an error, not a
    silent bug.
    """

    def __init__(self, params: ParamStore, config: ViTConfig):
        self.params = params.freeze()
        self.config = config
        self._hash = params.sha256()

    @property
    def sha256(self) -> str:
        return self._hash

    def encode(self, image) -> TokenGrid:
        return encode(image, self.params, self.config)

    def verify_frozen(self) -> None:
        if self.params.sha256() != self._hash:
            raise FrozenViolationError("frozen generalist parameters changed")


def fused_features(generalist: FrozenEncoder, specialist: ParamStore,
                   spec_config: ViTConfig, image) -> FusedFeatures:
    """Forward both encoders and join their token grids.

    Gradients flow into the specialist only; the generalist side of the
    concat is a constant by construction.
    """
    gen_grid = generalist.encode(image)
    spec_grid = encode(image, specialist, spec_config)
    return fuse(gen_grid, spec_grid)
