"""Synthetic image and task generators used for toy training and tests."""

from __future__ import annotations

import numpy as np

from .numkernel import Rng

GLYPH_COUNT = 8

# 8 distinct 4x4 binary glyphs, rendered scaled into images for the toy
# OCR alignment task.
_GLYPHS = np.array([
    [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],  # box
    [[0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0]],  # bar
    [[1, 1, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]],  # stripes
    [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],  # cross
    [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],  # checker
    [[1, 1, 1, 1], [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]],  # corner
    [[0, 0, 0, 1], [0, 0, 1, 1], [0, 1, 1, 1], [1, 1, 1, 1]],  # wedge
    [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]],  # dots
], dtype=np.float32)


def document_image(rng: Rng, size: int = 64) -> np.ndarray:
    """Document-like page: near-white background, solid text-block regions,
    and a few thin dark rules. Most patches are internally near-constant."""
    img = np.full((size, size), 0.95, dtype=np.float32)
    img += rng.normal((size, size), 0.005)
    n_blocks = int(rng.integers(1, 3))
    for _ in range(n_blocks):
        h = int(rng.integers(size // 8, size // 3))
        w = int(rng.integers(size // 3, size - 4))
        y0 = int(rng.integers(0, size - h))
        x0 = int(rng.integers(0, size - w))
        shade = 0.55 + float(rng.uniform((), 0.0, 0.15))
        img[y0:y0 + h, x0:x0 + w] = shade + rng.normal((h, w), 0.01)
    n_lines = int(rng.integers(1, 3))
    for _ in range(n_lines):
        y = int(rng.integers(2, size - 2))
        x0 = int(rng.integers(0, size // 3))
        x1 = int(rng.integers(size // 2, size))
        img[y, x0:x1] = 0.1 + rng.uniform((), 0.0, 0.1)
    return np.clip(img, 0.0, 1.0)


def natural_image(rng: Rng, size: int = 64) -> np.ndarray:
    """Natural-like image: smooth random gradients plus broadband noise."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    img = np.zeros((size, size), dtype=np.float32)
    for _ in range(3):
        fy, fx = rng.uniform((2,), 0.5, 3.0)
        py, px = rng.uniform((2,), 0.0, 2 * np.pi)
        amp = float(rng.uniform((), 0.2, 0.5))
        img += amp * np.sin(2 * np.pi * (fy * yy + px) ) * np.cos(2 * np.pi * (fx * xx + py))
    img += rng.normal((size, size), 0.3)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-6)
    return img.astype(np.float32)


def document_corpus(rng: Rng, n: int, size: int = 64) -> list[np.ndarray]:
    return [document_image(rng.child(f"doc{i}"), size) for i in range(n)]


def natural_corpus(rng: Rng, n: int, size: int = 64) -> list[np.ndarray]:
    return [natural_image(rng.child(f"nat{i}"), size) for i in range(n)]


def mae_pretrain_images(rng: Rng, n: int, size: int = 32) -> list[np.ndarray]:
    """Mixed document/natural corpus for toy self-supervised pretraining."""
    out = []
    for i in range(n):
        child = rng.child(f"img{i}")
        if i % 2 == 0:
            out.append(document_image(child, size))
        else:
            out.append(natural_image(child, size))
    return out


def glyph_image(glyph_id: int, rng: Rng, size: int = 32) -> np.ndarray:
    """Render one of the fixed glyph patterns across the full image with
    pixel noise; recognizing it requires reading the patch content."""
    img = rng.normal((size, size), 0.05) + 0.1
    cell = size // 4
    g = np.kron(_GLYPHS[glyph_id % GLYPH_COUNT], np.ones((cell, cell), np.float32))
    img += 0.8 * g
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def square_localization_sample(rng: Rng, size: int = 32):
    """White square on black; returns (image, bbox in [0,1] coords)."""
    side = int(rng.integers(size // 4, size // 2 + 1))
    y0 = int(rng.integers(0, size - side + 1))
    x0 = int(rng.integers(0, size - side + 1))
    img = rng.normal((size, size), 0.02)
    img[y0:y0 + side, x0:x0 + side] = 1.0
    box = np.array([x0 / size, y0 / size, (x0 + side) / size, (y0 + side) / size],
                   dtype=np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32), box


def two_region_layout_sample(rng: Rng, size: int = 32, patch_size: int = 8):
    """Split layout with per-patch labels: 0 = text-like, 1 = figure-like,
    2 = background."""
    img = np.full((size, size), 0.9, dtype=np.float32)
    gs = size // patch_size
    labels = np.full((gs, gs), 2, dtype=np.int64)
    split = int(rng.integers(1, gs))
    horizontal = bool(rng.integers(0, 2))
    for r in range(gs):
        for c in range(gs):
            region = r < split if horizontal else c < split
            y, x = r * patch_size, c * patch_size
            if region:
                labels[r, c] = 0
                for line in range(1, patch_size, 3):
                    img[y + line, x:x + patch_size] = 0.1
            else:
                labels[r, c] = 1
                img[y:y + patch_size, x:x + patch_size] = \
                    0.5 + rng.normal((patch_size, patch_size), 0.2)
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels.reshape(-1)


def screenshot_class_sample(rng: Rng, size: int = 32):
    """4-class UI-style images: 0 list, 1 grid, 2 header, 3 blank."""
    cls = int(rng.integers(0, 4))
    img = rng.normal((size, size), 0.02) + 0.85
    if cls == 0:    # list: horizontal bars
        for y in range(2, size, 6):
            img[y:y + 2, 2:size - 2] = 0.2
    elif cls == 1:  # grid: tiles
        for y in range(2, size - 4, 8):
            for x in range(2, size - 4, 8):
                img[y:y + 5, x:x + 5] = 0.3
    elif cls == 2:  # header: one thick top band
        img[0:size // 4, :] = 0.15
    return np.clip(img, 0.0, 1.0).astype(np.float32), cls
