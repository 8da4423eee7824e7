"""Retrieval scoring under the cross-camera protocol: per-query junk
filtering (same identity AND same camera dropped), average precision at
match ranks, and the cumulative match curve.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import no_grad
from .datagen import Sample
from .errors import EvaluationError, UsageError
from .imageops import patchify
from .model import Model
from .textproc import encode as encode_caption
from .textproc import Vocabulary


@dataclass
class FeatureMatrix:
    features: np.ndarray    # N x d, L2-normalized rows
    identities: np.ndarray  # N
    cameras: np.ndarray     # N


@dataclass
class EvalResult:
    mean_ap: float
    cmc: np.ndarray               # cmc[k] = P(first match within top k+1)
    per_query_ap: List[float]     # NaN for skipped queries
    num_valid_queries: int

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_json(self) -> str:
        return json.dumps({
            "mAP": self.mean_ap,
            "cmc": [float(v) for v in self.cmc],
            "num_valid_queries": self.num_valid_queries,
        }, indent=1, sort_keys=True)

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "eval_result.json").write_text(self.to_json() + "\n",
                                                    encoding="utf-8")
        with open(directory / "per_query_ap.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_index", "ap"])
            for i, ap in enumerate(self.per_query_ap):
                writer.writerow([i, "" if np.isnan(ap) else repr(float(ap))])


def extract_features(model: Model, samples: Sequence[Sample],
                     batch_size: int = 32, path: str = "image",
                     vocab: Optional[Vocabulary] = None) -> FeatureMatrix:
    """L2-normalized retrieval features for a list of samples.

    ``path="image"`` uses the image-encoder CLS vector (the default
    inference route: gallery/query images carry no captions);
    ``path="multimodal"`` runs the fusion encoder with an empty caption
    and uses its CLS vector instead.
    """
    if path not in ("image", "multimodal"):
        raise UsageError(f"unknown feature path {path!r}")
    if path == "multimodal" and vocab is None:
        raise UsageError("multimodal feature path needs the vocabulary")
    rows = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            grids = [patchify(s.image, model.cfg.patch_size) for s in chunk]
            img = model.encode_image(grids)
            if path == "image":
                feats = img.cls().data
            else:
                seqs = [encode_caption("", vocab, model.cfg.caption_len)
                        for _ in chunk]
                feats = model.fuse(img, model.encode_text(seqs)).cls().data
            rows.append(feats)
    features = np.concatenate(rows, axis=0)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    features = features / np.maximum(norms, 1e-12)
    return FeatureMatrix(features,
                         np.array([s.identity for s in samples]),
                         np.array([s.camera for s in samples]))


def distance_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, Q x G."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise UsageError(
            f"distance_matrix: incompatible shapes {q.shape} and {g.shape}")
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * (q @ g.T)
    return np.sqrt(np.maximum(d2, 0.0))


def evaluate(distmat: np.ndarray, query_ids: np.ndarray, query_cams: np.ndarray,
             gallery_ids: np.ndarray, gallery_cams: np.ndarray,
             max_rank: int = 10) -> EvalResult:
    """Score a Q x G distance matrix.

    Per query: sort the gallery ascending with stable index tie-breaking,
    drop junk entries (same identity and same camera as the query), then
    AP averages precision at each match rank and the CMC records the first
    match. Queries with no remaining match are skipped in both aggregates.
    """
    distmat = np.asarray(distmat)
    nq, ng = distmat.shape
    if not (len(query_ids) == len(query_cams) == nq
            and len(gallery_ids) == len(gallery_cams) == ng):
        raise UsageError("evaluate: metadata lengths do not match the distance matrix")
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)

    per_query_ap: List[float] = []
    cmc_sum = np.zeros(max_rank)
    valid = 0
    for qi in range(nq):
        order = np.argsort(distmat[qi], kind="stable")
        junk = (gallery_ids[order] == query_ids[qi]) & \
               (gallery_cams[order] == query_cams[qi])
        kept = order[~junk]
        matches = gallery_ids[kept] == query_ids[qi]
        if not matches.any():
            per_query_ap.append(float("nan"))
            continue
        valid += 1
        hits = np.cumsum(matches)
        ranks = np.flatnonzero(matches) + 1  # 1-based post-filter ranks
        ap = float(np.mean(hits[ranks - 1] / ranks))
        per_query_ap.append(ap)
        first = ranks[0]
        if first <= max_rank:
            cmc_sum[first - 1:] += 1.0
    if valid == 0:
        raise EvaluationError("no query has a valid cross-camera match")
    mean_ap = float(np.nanmean(np.array(per_query_ap, dtype=float)))
    return EvalResult(mean_ap, cmc_sum / valid, per_query_ap, valid)
