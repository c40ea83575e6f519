"""Triplet NMS over (human box, object box, HOI category) predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kernels import triplet_nms_keep


@dataclass(frozen=True)
class TripletPrediction:
    human_box: tuple  # x1, y1, x2, y2
    object_box: tuple
    category: int
    score: float
    object_class: int = -1
    query: int = -1

    def to_dict(self) -> dict:
        return {
            "human_box": [float(v) for v in self.human_box],
            "object_box": [float(v) for v in self.object_box],
            "category": int(self.category),
            "score": float(self.score),
        }


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Descending by score, ties broken by position."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def triplet_nms(triplets: list[TripletPrediction], iou_thresh: float = 0.7,
                keep_top: int | None = 100) -> list[TripletPrediction]:
    """Greedy per-category suppression using min(IoU_h, IoU_o), then the global top ``keep_top``.

    Output is sorted by descending score (ties by input position).
    """
    if not triplets:
        return []
    h = np.array([t.human_box for t in triplets], dtype=np.float64)
    o = np.array([t.object_box for t in triplets], dtype=np.float64)
    cats = np.array([t.category for t in triplets], dtype=np.int64)
    scores = np.array([t.score for t in triplets], dtype=np.float64)
    order = ranking_order(scores)
    keep = triplet_nms_keep(h, o, cats, order, iou_thresh)
    kept = [int(i) for i in order if keep[i]]
    if keep_top is not None:
        kept = kept[:keep_top]
    return [triplets[i] for i in kept]
