"""Desk-scale document/web vision-encoder pipeline.

Subpackages: differentiable kernel (numkernel), ViT encoder (vit), masked
reconstruction pretraining (mae), patch statistics (patchstat), supervised
alignment (align), weight merging (merge), ensemble fusion (fusion), task
heads (heads), and the experiment harness (harness).
"""

from .numkernel import ParamStore, Rng, Tensor, grad_check
from .vit import TokenGrid, ViTConfig

__all__ = ["ParamStore", "Rng", "Tensor", "TokenGrid", "ViTConfig", "grad_check"]

__version__ = "0.1.0"
