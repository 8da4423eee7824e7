"""Training objectives: identity cross-entropy, batch-hard triplet, their
sum for finetuning, and the masked/matching pretraining losses.

The masked image/text losses read the unimodal encoder states; the fused
reconstruction losses read the multimodal states. Absent components stay
absent in the LossReport (never reported as zero).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError
from .imageops import ImageMaskPlan
from .model import ImageEncoding, Model, MultimodalEncoding, TextEncoding
from .textproc import TextMaskPlan

LOSS_KEYS = ("id", "triplet", "mim", "mlm", "mmm_image", "mmm_text", "itm")

DEFAULT_WEIGHTS = {k: 1.0 for k in LOSS_KEYS}


@dataclass
class LossReport:
    """Named scalar losses with element counts; total is the weighted sum
    of the components that are present."""
    values: Dict[str, float]
    counts: Dict[str, int]
    total: float

    def csv_row(self) -> List[str]:
        row = []
        for key in LOSS_KEYS:
            row.append(f"{self.values[key]!r}" if key in self.values else "")
        row.append(f"{self.total!r}")
        return row

    @staticmethod
    def csv_header() -> List[str]:
        return list(LOSS_KEYS) + ["total"]


def combine_components(components: Dict[str, Tuple[Tensor, int]],
                       weights: Optional[Dict[str, float]] = None
                       ) -> Tuple[Tensor, LossReport]:
    """Weighted sum of present loss components plus its report."""
    if not components:
        raise UsageError("combine_components: no loss component present")
    weights = weights or DEFAULT_WEIGHTS
    total = None
    values, counts = {}, {}
    for key, (tensor, count) in components.items():
        w = float(weights.get(key, 1.0))
        term = ad.scale(tensor, w) if w != 1.0 else tensor
        total = term if total is None else ad.add(total, term)
        values[key] = tensor.item()
        counts[key] = count
    return total, LossReport(values, counts, total.item())


# ---------------------------------------------------------------------------
# finetuning objectives
# ---------------------------------------------------------------------------

def id_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of class logits against identity labels."""
    return ad.cross_entropy(logits, labels)


def triplet_loss(features: Tensor, labels: np.ndarray, margin: float = 0.3,
                 mining: str = "batch_hard",
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Hinge over anchor-positive / anchor-negative distance gaps.

    batch_hard mining pairs each anchor with its farthest same-label and
    nearest different-label sample; "random" picks both uniformly (ablation
    option). Distances are Euclidean.
    """
    labels = np.asarray(labels)
    b = features.shape[0]
    if labels.shape != (b,):
        raise UsageError(f"triplet_loss: {labels.shape} labels for batch {b}")
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise UsageError(f"triplet_loss: need >= 2 distinct labels, got only {uniq[0]}")
    if counts.min() < 2:
        bad = uniq[counts.argmin()]
        raise UsageError(f"triplet_loss: label {bad} appears fewer than 2 times")

    dist = ad.pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same

    if mining == "batch_hard":
        pos_idx = np.where(pos_mask, dist.data, -np.inf).argmax(axis=1)
        neg_idx = np.where(neg_mask, dist.data, np.inf).argmin(axis=1)
    elif mining == "random":
        if rng is None:
            raise UsageError("triplet_loss: random mining needs an rng")
        pos_idx = np.array([rng.choice(np.flatnonzero(pos_mask[i])) for i in range(b)])
        neg_idx = np.array([rng.choice(np.flatnonzero(neg_mask[i])) for i in range(b)])
    else:
        raise UsageError(f"triplet_loss: unknown mining mode {mining!r}")

    flat = ad.reshape(dist, (b * b,))
    rows = np.arange(b)
    d_ap = ad.take_rows(flat, rows * b + pos_idx)
    d_an = ad.take_rows(flat, rows * b + neg_idx)
    hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), Tensor(np.full(b, float(margin)))))
    return ad.mean_all(hinge)


def total_finetune_loss(id_term: Tensor, triplet_term: Tensor) -> Tensor:
    """Unweighted sum of the identity and triplet objectives."""
    return ad.add(id_term, triplet_term)


# ---------------------------------------------------------------------------
# masked-prediction objectives
# ---------------------------------------------------------------------------

def _gather_positions(seq: Tensor, row_offsets: np.ndarray) -> Tensor:
    b, length, d = seq.shape
    return ad.take_rows(ad.reshape(seq, (b * length, d)), row_offsets)


def _plan_rows(plans: Sequence, base: int, length: int) -> Tuple[np.ndarray, List[int]]:
    """Flat (batch*length) row indices of every masked position."""
    rows, owners = [], []
    for i, plan in enumerate(plans):
        if plan is None or len(plan) == 0:
            continue
        rows.extend(i * length + base + int(p) for p in plan.positions)
        owners.append(i)
    return np.asarray(rows, dtype=np.intp), owners


def mim_loss(model: Model, enc: ImageEncoding,
             plans: Sequence[Optional[ImageMaskPlan]]) -> Optional[Tuple[Tensor, int]]:
    """Pixel regression at masked patches of the image-encoder states.

    Returns (loss, masked-position count), or None when every plan is
    empty. Plans must carry targets.
    """
    length = 1 + enc.num_patches
    rows, owners = _plan_rows(plans, 1, length)
    if rows.size == 0:
        return None
    targets = np.concatenate([plans[i].targets for i in owners], axis=0)
    hidden = _gather_positions(enc.seq, rows)
    pred = model.head("mim", hidden)
    return ad.mse(pred, targets), int(rows.size)


def mlm_loss(model: Model, enc: TextEncoding,
             plans: Sequence[Optional[TextMaskPlan]]) -> Optional[Tuple[Tensor, int]]:
    """Vocabulary cross-entropy at masked token positions."""
    length = enc.seq.shape[1]
    rows, owners = _plan_rows(plans, 0, length)
    if rows.size == 0:
        return None
    labels = np.concatenate([plans[i].original_ids for i in owners])
    hidden = _gather_positions(enc.seq, rows)
    return ad.cross_entropy(model.head("mlm", hidden), labels), int(rows.size)


def mmm_loss(model: Model, fused: MultimodalEncoding,
             img_plans: Sequence[Optional[ImageMaskPlan]],
             txt_plans: Sequence[Optional[TextMaskPlan]]
             ) -> Tuple[Optional[Tuple[Tensor, int]], Optional[Tuple[Tensor, int]]]:
    """Masked reconstruction from the fused states: (image part, text part).

    The image part regresses pixels with a head over the fused image span;
    the text part classifies vocabulary ids over the fused text span. A
    side with no masked position is absent.
    """
    length = fused.seq.shape[1]
    img_part = txt_part = None

    rows, owners = _plan_rows(img_plans, fused.image_span[0], length)
    if rows.size:
        targets = np.concatenate([img_plans[i].targets for i in owners], axis=0)
        pred = model.head("mmm_img", _gather_positions(fused.seq, rows))
        img_part = (ad.mse(pred, targets), int(rows.size))

    rows, owners = _plan_rows(txt_plans, fused.text_span[0], length)
    if rows.size:
        labels = np.concatenate([txt_plans[i].original_ids for i in owners])
        logits = model.head("mmm_txt", _gather_positions(fused.seq, rows))
        txt_part = (ad.cross_entropy(logits, labels), int(rows.size))

    return img_part, txt_part


# ---------------------------------------------------------------------------
# image-text matching
# ---------------------------------------------------------------------------

def itm_caption_assignment(identities: Sequence[int], rng: np.random.Generator
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """Choose a caption source per image: half aligned, half shuffled.

    Shuffled captions always come from a batch member with a different
    identity. Returns (source index per image, match labels 1/0).
    """
    ids = np.asarray(identities)
    b = ids.size
    if b < 2 or np.unique(ids).size < 2:
        raise UsageError(
            "itm pairs need a batch with >= 2 distinct identities to shuffle captions")
    perm = rng.permutation(b)
    negatives = perm[: b // 2]
    source = np.arange(b)
    labels = np.ones(b, dtype=np.intp)
    for i in negatives:
        candidates = np.flatnonzero(ids != ids[i])
        source[i] = int(candidates[rng.integers(candidates.size)])
        labels[i] = 0
    return source, labels


def itm_loss(model: Model, fused: MultimodalEncoding,
             match_labels: np.ndarray) -> Tuple[Tensor, int]:
    """2-way matched/mismatched classification on the fused CLS vector."""
    labels = np.asarray(match_labels, dtype=np.intp)
    if labels.min() == labels.max():
        raise UsageError("itm_loss: batch must contain both matched and mismatched pairs")
    logits = model.head("itm", fused.cls())
    return ad.cross_entropy(logits, labels), int(labels.size)
