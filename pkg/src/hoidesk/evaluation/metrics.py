"""HOI mean average precision (default setting: every image counts for every category)."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from ..errors import UnknownCategory
from ..kernels import match_image
from .nms import TripletPrediction, ranking_order


@dataclass(frozen=True)
class HoiAnnotation:
    human_box: tuple
    object_box: tuple
    category: int

    def to_dict(self) -> dict:
        return {"human_box": [float(v) for v in self.human_box],
                "object_box": [float(v) for v in self.object_box],
                "category": int(self.category)}


@dataclass
class MapResult:
    per_category: dict
    mean: float
    rare: float | None
    non_rare: float | None

    def to_report(self) -> dict:
        return {
            "full": self.mean,
            "rare": self.rare,
            "non_rare": self.non_rare,
            "per_category": {str(k): v for k, v in sorted(self.per_category.items())},
        }


def average_precision(tp: np.ndarray, npos: int, interpolation: str = "all-point") -> float:
    """AP of a ranked true/false-positive sequence against ``npos`` ground truths."""
    if npos <= 0:
        raise ValueError("npos must be positive")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / npos
    prec = ctp / np.arange(1, tp.size + 1)
    if interpolation == "11-point":
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            sel = rec >= t
            ap += (prec[sel].max() if sel.any() else 0.0) / 11.0
        return float(ap)
    if interpolation != "all-point":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _fields(item):
    if isinstance(item, (TripletPrediction, HoiAnnotation)):
        return item.human_box, item.object_box, int(item.category), getattr(item, "score", None)
    return item["human_box"], item["object_box"], int(item["category"]), item.get("score")


def compute_map(
    predictions: Mapping[str, Iterable],
    ground_truth: Mapping[str, Iterable],
    num_categories: int,
    category_subset: Iterable[int] | None = None,
    rare_mask: np.ndarray | None = None,
    iou_thresh: float = 0.5,
    interpolation: str = "all-point",
) -> MapResult:
    """Per-category AP, their mean, and Rare / Non-Rare means.

    Only categories in ``category_subset`` (default: all) that have at least one
    ground truth contribute. Images are processed in sorted-id order so the
    result does not depend on the order of the input mappings.
    """
    subset = set(range(num_categories)) if category_subset is None else {int(c) for c in category_subset}
    for c in subset:
        if not 0 <= c < num_categories:
            raise UnknownCategory(c)
    images = sorted(set(map(str, ground_truth)) | set(map(str, predictions)))
    gt_by_key = {str(k): v for k, v in ground_truth.items()}
    pred_by_key = {str(k): v for k, v in predictions.items()}

    npos: dict[int, int] = defaultdict(int)
    ranked: dict[int, list] = defaultdict(list)
    for rank, img in enumerate(images):
        gts = defaultdict(list)
        for g in gt_by_key.get(img, ()):
            h, o, c, _ = _fields(g)
            if not 0 <= c < num_categories:
                raise UnknownCategory(c)
            gts[c].append((h, o))
            npos[c] += 1
        preds = defaultdict(list)
        for i, p in enumerate(pred_by_key.get(img, ())):
            h, o, c, s = _fields(p)
            if not 0 <= c < num_categories:
                raise UnknownCategory(c)
            preds[c].append((float(s), i, h, o))
        for c, plist in preds.items():
            if c not in subset:
                continue
            scores = np.array([p[0] for p in plist])
            order = ranking_order(scores)
            plist = [plist[i] for i in order]
            g = gts.get(c, [])
            if g:
                tp = match_image([p[2] for p in plist], [p[3] for p in plist],
                                 [x[0] for x in g], [x[1] for x in g], iou_thresh)
            else:
                tp = np.zeros(len(plist), dtype=bool)
            for p, t in zip(plist, tp):
                ranked[c].append((-p[0], rank, p[1], bool(t)))

    per_category = {}
    for c in sorted(subset):
        if npos.get(c, 0) == 0:
            continue
        recs = sorted(ranked.get(c, []))
        per_category[c] = average_precision(np.array([r[3] for r in recs], dtype=bool), npos[c], interpolation)

    def _mean(keys):
        vals = [per_category[k] for k in keys]
        return float(np.mean(vals)) if vals else None

    cats = sorted(per_category)
    mean = _mean(cats)
    if rare_mask is None:
        rare = non_rare = None
    else:
        rare_mask = np.asarray(rare_mask, dtype=bool)
        rare = _mean([c for c in cats if rare_mask[c]])
        non_rare = _mean([c for c in cats if not rare_mask[c]])
    return MapResult(per_category, 0.0 if mean is None else mean, rare, non_rare)
