"""Receiver-side matching of generated candidates to received features.

Distances combine cosine and Euclidean terms.  The cosine formula is a
similarity (1 at identity), so it enters the combined score as
(1 - cosine) to agree in polarity with the Euclidean distance: lower is
always more similar.  Ties break toward the lowest candidate index
everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import (ImageEncoder, TextScorer, extract_image_features_batch,
                      extract_text_features_batch)
from .fusion import FusionParams, fuse

__all__ = ["DistanceScore", "SelectionResult", "dist_pair", "dist_text",
           "dist_image", "dist_fused", "select_sequential",
           "select_simultaneous"]


@dataclass(frozen=True)
class DistanceScore:
    """Combined distance between two vectors; lower is more similar."""
    cosine_term: float    # cosine similarity, in [-1, 1]
    euclid_term: float
    combined: float
    zero_vector: bool = False


def dist_pair(a: np.ndarray, b: np.ndarray, lam: float = 1.0) -> DistanceScore:
    """Combined score (1 - cosine_similarity) + lam * euclidean.

    A zero vector has undefined direction; its cosine similarity is
    defined as 0 and the result is flagged.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    zero = na == 0.0 or nb == 0.0
    cos = 0.0 if zero else float(a @ b / (na * nb))
    euclid = float(np.linalg.norm(a - b))
    return DistanceScore(cosine_term=cos, euclid_term=euclid,
                         combined=(1.0 - cos) + lam * euclid,
                         zero_vector=zero)


def dist_text(cand: np.ndarray, recv: np.ndarray, lam: float = 1.0) -> float:
    """Mean combined distance over aligned prompt rows."""
    cand = np.asarray(cand, dtype=np.float64)
    recv = np.asarray(recv, dtype=np.float64)
    if cand.shape[0] != recv.shape[0]:
        raise ValueError(f"row count mismatch: {cand.shape[0]} vs "
                         f"{recv.shape[0]}")
    scores = [dist_pair(cand[i], recv[i], lam).combined
              for i in range(cand.shape[0])]
    return float(np.mean(scores))


def dist_image(cand: np.ndarray, recv: np.ndarray, lam: float = 1.0) -> float:
    """Combined distance between two image-feature vectors."""
    cand = np.asarray(cand)
    recv = np.asarray(recv)
    if cand.shape != recv.shape:
        raise ValueError(f"shape mismatch: {cand.shape} vs {recv.shape}")
    return dist_pair(cand, recv, lam).combined


def dist_fused(cand: np.ndarray, recv: np.ndarray, lam: float = 1.0) -> float:
    """Combined distance between two fused-feature vectors."""
    return dist_image(cand, recv, lam)


@dataclass
class SelectionResult:
    """Outcome of one selection pass over a candidate set."""
    winner_index: int
    winner: np.ndarray
    shortlist: list            # (candidate index, DistanceScore)
    stage_trace: dict          # stage name -> [(index, combined score)]

    def to_json(self) -> str:
        return json.dumps({
            "winner_index": self.winner_index,
            "shortlist": [[int(i), s.combined] for i, s in self.shortlist],
            "stage_trace": {k: [[int(i), float(s)] for i, s in v]
                            for k, v in self.stage_trace.items()},
        }, sort_keys=True)


def _candidate_features(images: np.ndarray, enc: ImageEncoder | None,
                        scorer: TextScorer | None,
                        cand_text: np.ndarray | None,
                        cand_image: np.ndarray | None,
                        need_text: bool, need_image: bool):
    if need_text and cand_text is None:
        cand_text = extract_text_features_batch(scorer, images)[1]
    if need_image and cand_image is None:
        cand_image = extract_image_features_batch(enc, images)
    return cand_text, cand_image


def select_sequential(image_set, recv_text: np.ndarray,
                      recv_image: np.ndarray, q: int,
                      enc: ImageEncoder | None = None,
                      scorer: TextScorer | None = None,
                      lam: float = 1.0,
                      cand_text: np.ndarray | None = None,
                      cand_image: np.ndarray | None = None) -> SelectionResult:
    """Two-stage matching: shortlist the q nearest by text distance,
    decide by image distance among the survivors.

    Candidate features are extracted with the shared encoder/scorer
    unless precomputed arrays are supplied (`cand_text`: (p, n_text,
    d_text), `cand_image`: (p, d_image)).
    """
    images = np.asarray(image_set.images)
    p = images.shape[0]
    if not 1 <= q <= p:
        raise ValueError(f"q={q} must be in [1, {p}]")
    cand_text, cand_image = _candidate_features(
        images, enc, scorer, cand_text, cand_image, True, True)

    text_scores = np.array([dist_text(cand_text[i], recv_text, lam)
                            for i in range(p)])
    survivors = np.sort(np.argsort(text_scores, kind="stable")[:q])

    image_scores = np.array([dist_pair(cand_image[i], recv_image, lam).combined
                             for i in survivors])
    winner = int(survivors[int(np.argmin(image_scores))])

    shortlist = [(int(i), dist_pair(cand_image[i], recv_image, lam))
                 for i in survivors]
    trace = {
        "text": [(int(i), float(text_scores[i])) for i in range(p)],
        "image": [(int(i), float(s)) for i, s in zip(survivors, image_scores)],
    }
    return SelectionResult(winner_index=winner, winner=images[winner],
                           shortlist=shortlist, stage_trace=trace)


def select_simultaneous(image_set, recv_fused: np.ndarray,
                        params: FusionParams,
                        enc: ImageEncoder | None = None,
                        scorer: TextScorer | None = None,
                        lam: float = 1.0,
                        cand_text: np.ndarray | None = None,
                        cand_image: np.ndarray | None = None,
                        cand_fused: np.ndarray | None = None) -> SelectionResult:
    """One-stage matching on the attention-fused feature."""
    images = np.asarray(image_set.images)
    p = images.shape[0]
    if p == 0:
        raise ValueError("candidate set is empty")
    if cand_fused is None:
        cand_text, cand_image = _candidate_features(
            images, enc, scorer, cand_text, cand_image, True, True)
        cand_fused = np.stack([fuse(params, cand_image[i], cand_text[i])
                               for i in range(p)])

    scores = [dist_pair(cand_fused[i], recv_fused, lam) for i in range(p)]
    combined = np.array([s.combined for s in scores])
    winner = int(np.argmin(combined))

    trace = {"fused": [(int(i), float(combined[i])) for i in range(p)]}
    return SelectionResult(winner_index=winner, winner=images[winner],
                           shortlist=[(winner, scores[winner])],
                           stage_trace=trace)
