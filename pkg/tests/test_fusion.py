"""Frozen-generalist + specialist channel-concat fusion."""

import numpy as np
import pytest

from docenc.errors import FrozenViolationError
from docenc.fusion import FrozenEncoder, fuse, fused_features
from docenc.heads import bbox_sample_loss, finetune, init_bbox_head
from docenc.numkernel import Rng, Tensor, mse
from docenc.optim import AdamW
from docenc.vit import TokenGrid, ViTConfig, init_params

GEN = ViTConfig(image_size=32, patch_size=16, dim=16, depth=1, heads=2, mlp_ratio=2)
SPEC = ViTConfig(image_size=32, patch_size=8, dim=8, depth=1, heads=2, mlp_ratio=2)


def _grid(rows, cols, dim, seed=0):
    return TokenGrid(rows, cols, dim, Tensor(Rng(seed).normal((rows * cols, dim))))


def _encoders(seed=0):
    rng = Rng(seed)
    generalist = FrozenEncoder(init_params(GEN, rng.child("gen")), GEN)
    specialist = init_params(SPEC, rng.child("spec"))
    return generalist, specialist


# --- fuse ------------------------------------------------------------------------

def test_fused_dim_is_sum_of_widths():
    fused = fuse(_grid(2, 2, 5, 0), _grid(2, 2, 3, 1))
    assert fused.grid.dim == 8
    assert (fused.gen_dim, fused.spec_dim) == (5, 3)


def test_generalist_channels_pass_through_bit_exactly():
    gen = _grid(2, 2, 5, 2)
    fused = fuse(gen, _grid(2, 2, 3, 3))
    np.testing.assert_array_equal(fused.grid.data.data[:, :5], gen.data.data)


def test_specialist_resampled_to_generalist_geometry():
    gen = _grid(2, 2, 4, 4)
    spec = _grid(4, 4, 3, 5)
    fused = fuse(gen, spec)
    assert (fused.grid.rows, fused.grid.cols) == (2, 2)
    assert fused.grid.dim == 7
    # generalist half still untouched after resampling
    np.testing.assert_array_equal(fused.grid.data.data[:, :4], gen.data.data)


def test_fused_features_end_to_end_dims():
    generalist, specialist = _encoders()
    img = Rng(9).uniform((32, 32), 0.0, 1.0)
    fused = fused_features(generalist, specialist, SPEC, img)
    assert fused.grid.dim == GEN.dim + SPEC.dim
    assert (fused.grid.rows, fused.grid.cols) == (GEN.grid_side, GEN.grid_side)
    np.testing.assert_array_equal(fused.grid.data.data[:, :GEN.dim],
                                  generalist.encode(img).data.data)


# --- freezing ----------------------------------------------------------------------

def test_frozen_hash_stable_and_verifiable():
    generalist, _ = _encoders()
    h = generalist.sha256
    generalist.verify_frozen()
    generalist.params["patch_embed.b"].data[0] += 1.0  # simulate a drifted store
    with pytest.raises(FrozenViolationError):
        generalist.verify_frozen()
    generalist.params["patch_embed.b"].data[0] -= 1.0
    assert generalist.sha256 == h


def test_optimizer_rejects_frozen_store():
    generalist, _ = _encoders()
    with pytest.raises(FrozenViolationError):
        AdamW.from_stores([generalist.params], lr=1e-3)


def test_frozen_generalist_unchanged_by_head_training():
    generalist, specialist = _encoders()
    rng = Rng(1)
    head = init_bbox_head(GEN.dim + SPEC.dim, rng.child("head"))
    from docenc import data as synth
    samples = [synth.square_localization_sample(rng.child(f"s{i}"), 32)
               for i in range(8)]
    before = generalist.sha256

    def features(image):
        return fused_features(generalist, specialist, SPEC, image).grid

    finetune(features, head, lambda g, s: bbox_sample_loss(g, s, head),
             samples, [specialist], steps=3, lr=1e-3, batch_size=4,
             rng=rng.child("train"))
    generalist.verify_frozen()
    assert generalist.params.sha256() == before


# --- gradient routing -----------------------------------------------------------------

def test_gradients_reach_specialist_only():
    generalist, specialist = _encoders()
    img = Rng(2).uniform((32, 32), 0.0, 1.0)
    fused = fused_features(generalist, specialist, SPEC, img)
    target = Tensor(np.zeros(fused.grid.data.shape, np.float32))
    mse(fused.grid.data, target).backward()
    spec_grads = [t.grad for t in specialist.tensors()]
    assert any(g is not None and np.abs(g).max() > 0 for g in spec_grads)
    assert all(t.grad is None for t in generalist.params.tensors())


def test_gradient_flows_through_interpolation():
    # specialist grid differs in geometry, so the bilinear resampling sits on
    # the gradient path
    gen = _grid(2, 2, 2, 6)
    spec_data = Tensor(Rng(7).normal((16, 3)), requires_grad=True)
    spec = TokenGrid(4, 4, 3, spec_data)
    fused = fuse(gen, spec)
    fused.grid.data.sum().backward()
    assert spec_data.grad is not None
    # partition of unity: each source token's total weight sums to the ratio
    # of grid sizes, so gradient mass is conserved per channel
    assert np.allclose(spec_data.grad.sum(axis=0), 4.0, atol=1e-5)
