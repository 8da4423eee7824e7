"""Class-activation heatmaps over the image encoder.

The patch hidden states of a chosen encoder block act as the feature map:
channel weights are the patch-averaged gradients of the target identity
logit, the map is the positive part of the weighted activations, scaled
to [0, 1] (skipped when identically zero). The logit comes from the
trained identity head; with fused features the text input is an empty
caption, so the image alone drives the class score.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .imageops import patchify, resize
from .model import Model
from .textproc import CLS_ID, PAD_ID, TokenSequence


@dataclass
class Heatmap:
    """Patch-resolution relevance grid in [0, 1] (max 1 unless all-zero)."""
    grid: np.ndarray   # rows x cols
    patch_size: int
    target_class: int

    def upsampled(self, height: int, width: int) -> np.ndarray:
        """Bilinear upsampling to pixel resolution (export-time only)."""
        rgb = np.repeat(self.grid[:, :, None], 3, axis=2)
        return resize(rgb, height, width)[:, :, 0]


def _empty_caption(length: int) -> TokenSequence:
    ids = np.full(length, PAD_ID, dtype=np.intp)
    ids[0] = CLS_ID
    mask = np.zeros(length, dtype=bool)
    mask[0] = True
    return TokenSequence(ids, mask)


def grad_cam(model: Model, image: np.ndarray, target_class: int = None,
             block: int = None, feature_source: str = "cls_m") -> Heatmap:
    """Relevance of each image patch to one identity logit.

    ``target_class=None`` uses the model's predicted class (the only
    meaningful choice for identities unseen in training). ``block``
    indexes the recorded image-encoder states (0 = embeddings, then one
    per block). The default is the deepest state below the encoder
    output: the output's own patch rows never feed the CLS logit, so
    their gradients vanish identically.
    """
    if model.num_id_classes is None:
        raise UsageError("grad_cam needs a model with a trained identity head")

    grid = patchify(image, model.cfg.patch_size)
    img_enc = model.encode_image([grid])
    if feature_source == "cls_m":
        txt_enc = model.encode_text([_empty_caption(model.cfg.caption_len)])
        feats = model.fuse(img_enc, txt_enc).cls()
    elif feature_source == "cls_i":
        feats = img_enc.cls()
    else:
        raise UsageError(f"unknown feature source {feature_source!r}")
    logits = model.head("id", feats)

    n = model.num_id_classes
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if not 0 <= target_class < n:
        raise UsageError(f"target class {target_class} outside [0, {n})")

    score = ad.slice_axis(logits, 1, target_class, target_class + 1)
    ad.backward(ad.sum_all(score))

    if block is None:
        block = -2 if len(img_enc.block_outputs) > 1 else -1
    states = img_enc.block_outputs[block]
    if states.grad is None:
        raise UsageError(f"block {block} is outside the recorded graph")
    activations = states.data[0, 1:, :]           # patch rows only
    gradients = states.grad[0, 1:, :]
    weights = gradients.mean(axis=0)
    heat = np.maximum(activations @ weights, 0.0)
    peak = heat.max()
    if peak > 0.0:
        heat = heat / peak
    return Heatmap(heat.reshape(grid.rows, grid.cols), grid.patch_size,
                   target_class)


# ---------------------------------------------------------------------------
# exports: PGM grid, PPM overlay, CSV values
# ---------------------------------------------------------------------------

def write_pgm(heatmap: Heatmap, path) -> None:
    """Binary P5 graymap of the patch grid, 8-bit."""
    grid = np.round(heatmap.grid * 255.0).astype(np.uint8)
    rows, cols = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())


def write_overlay_ppm(heatmap: Heatmap, image: np.ndarray, path) -> None:
    """Heat alpha-blended onto the image at 0.5 (red where relevant)."""
    h, w = image.shape[:2]
    alpha = 0.5 * heatmap.upsampled(h, w)[:, :, None]
    red = np.zeros_like(image)
    red[:, :, 0] = 1.0
    blend = np.clip((1.0 - alpha) * image + alpha * red, 0.0, 1.0)
    data = np.round(blend * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_grid_csv(heatmap: Heatmap, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in heatmap.grid:
            writer.writerow([repr(float(v)) for v in row])


def bbox_contrast(heatmap: Heatmap, bbox: tuple, rows: int, cols: int,
                  overlap_threshold: float = 0.5):
    """Mean heat inside vs outside the person box, at patch resolution.

    Returns (interior mean, background mean) or None when either side has
    no patch (bbox covering everything or nothing at this resolution).
    """
    p = heatmap.patch_size
    top, left, height, width = bbox
    r = np.arange(rows) * p
    c = np.arange(cols) * p
    dy = (np.minimum(r + p, top + height) - np.maximum(r, top)).clip(min=0)
    dx = (np.minimum(c + p, left + width) - np.maximum(c, left)).clip(min=0)
    overlap = (dy[:, None] * dx[None, :]) / float(p * p)
    interior = overlap >= overlap_threshold
    if interior.all() or not interior.any():
        return None
    return float(heatmap.grid[interior].mean()), float(heatmap.grid[~interior].mean())
