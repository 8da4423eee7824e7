"""Image-side preprocessing: bilinear resize, patch extraction and the two
patch mask planners (uniform random vs. person-region-aware).

Images are H×W×3 float64 arrays in [0, 1]. Patches are flattened row-major
(pixel row, pixel column, channel) so a grid reassembles losslessly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, UsageError


class DegenerateRegionWarning(UserWarning):
    """Raised as a warning when a bbox yields no maskable patches."""


@dataclass
class PatchGrid:
    """Non-overlapping p×p patches of one image, flattened per row."""
    patches: np.ndarray  # M x (p*p*3)
    rows: int
    cols: int
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


@dataclass
class ImageMaskPlan:
    """Masked patch indices plus their original pixel content."""
    positions: np.ndarray                  # sorted patch indices
    strategy: str                          # "random" | "region"
    targets: Optional[np.ndarray] = None   # len(positions) x (p*p*3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.intp)

    def __len__(self) -> int:
        return int(self.positions.size)

    def with_targets(self, grid: PatchGrid) -> "ImageMaskPlan":
        if self.positions.size and self.positions.max() >= grid.num_patches:
            raise UsageError("mask plan positions exceed the patch grid")
        return ImageMaskPlan(self.positions, self.strategy,
                             grid.patches[self.positions].copy())


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre sampling, clamped to [0, 1]."""
    if target_h < 1 or target_w < 1:
        raise UsageError(f"resize: target {target_h}x{target_w} must be positive")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (target_h, target_w):
        return img.copy()

    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0)


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    p = int(patch_size)
    if h % p or w % p:
        raise ConfigError(f"patchify: image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    # (rows, cols, p, p, 3) -> row-major patch order, row-major pixels inside
    blocks = img.reshape(rows, p, cols, p, 3).transpose(0, 2, 1, 3, 4)
    return PatchGrid(np.ascontiguousarray(blocks).reshape(rows * cols, p * p * 3),
                     rows, cols, p)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p = grid.patch_size
    blocks = grid.patches.reshape(grid.rows, grid.cols, p, p, 3)
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3, 4)).reshape(
        grid.rows * p, grid.cols * p, 3)


def random_mask_plan(num_patches: int, ratio: float, rng: np.random.Generator) -> ImageMaskPlan:
    """floor(ratio*M) patch indices, uniform without replacement."""
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"mask ratio must lie in (0, 1), got {ratio}")
    count = int(ratio * num_patches)
    positions = np.sort(rng.choice(num_patches, size=count, replace=False))
    return ImageMaskPlan(positions, "random")


def bbox_patch_overlaps(grid: PatchGrid, bbox: tuple) -> np.ndarray:
    """Fraction of each patch's area covered by the bbox, in patch order."""
    top, left, height, width = bbox
    p = grid.patch_size
    r = np.arange(grid.rows) * p
    c = np.arange(grid.cols) * p
    dy = (np.minimum(r + p, top + height) - np.maximum(r, top)).clip(min=0)
    dx = (np.minimum(c + p, left + width) - np.maximum(c, left)).clip(min=0)
    return (dy[:, None] * dx[None, :]).reshape(-1) / float(p * p)


def region_mask_plan(grid: PatchGrid, bbox: tuple, ratio: float,
                     rng: np.random.Generator,
                     overlap_threshold: float = 0.5) -> ImageMaskPlan:
    """Mask only patches that are mostly inside the person bbox.

    Candidates are patches whose bbox overlap is at least
    ``overlap_threshold`` of the patch area. The plan draws floor(ratio*M)
    of them uniformly; if there are fewer candidates the plan is short
    (background is never masked under this strategy), and an empty
    candidate set produces an empty plan plus a DegenerateRegionWarning.
    """
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"mask ratio must lie in (0, 1), got {ratio}")
    m = grid.num_patches
    candidates = np.flatnonzero(bbox_patch_overlaps(grid, bbox) >= overlap_threshold)
    if candidates.size == 0:
        warnings.warn("bbox overlaps no patch by >= 50%; empty region mask plan",
                      DegenerateRegionWarning)
        return ImageMaskPlan(np.empty(0, dtype=np.intp), "region")
    count = min(int(ratio * m), candidates.size)
    positions = np.sort(rng.choice(candidates, size=count, replace=False))
    return ImageMaskPlan(positions, "region")
