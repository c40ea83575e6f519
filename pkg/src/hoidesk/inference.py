"""Scoring a forward pass into ranked HOI triplets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifiers import (
    DEFAULT_ALPHA,
    DEFAULT_TOPK,
    ClassifierBank,
    expand_verb_scores,
    fuse_inference,
    fuse_training,
    score_inter,
    score_verb,
    triplet_score,
    zero_shot_enhance,
)
from .data_io import DatasetManifest, FeatureBundle, ImageRecord
from .errors import FileError, FormatError
from .evaluation.boxes import cxcywh_to_xyxy
from .evaluation.metrics import HoiAnnotation
from .evaluation.nms import TripletPrediction, triplet_nms
from .model import ForwardOutputs, HOIModel, forward
from .taxonomy import Taxonomy, check_fields
from .tensor import no_grad


@dataclass(frozen=True)
class InferenceConfig:
    alpha: float = DEFAULT_ALPHA
    topk: int = DEFAULT_TOPK
    enhance: bool = True
    triplet_score_mode: str = "squared"
    nms_iou: float = 0.7
    keep_top: int = 100
    candidates_per_image: int | None = None  # pre-NMS cap on (query, category) pairs


def training_scores(out: ForwardOutputs, bank: ClassifierBank, tax: Taxonomy, alpha: float, layer: int = -1):
    """S_t for one decoder layer (Tensor, differentiable)."""
    s_inter = score_inter(out.o_inter[layer], bank.e_inter)
    s_v = expand_verb_scores(score_verb(out.o_verb[layer], bank.e_verb), tax)
    return fuse_training(s_inter, s_v, alpha)


def image_scores(out: ForwardOutputs, b: int, v_g: np.ndarray, bank: ClassifierBank, tax: Taxonomy,
                 cfg: InferenceConfig) -> np.ndarray:
    """Per-(query, category) triplet scores for batch item ``b``."""
    s_inter = score_inter(out.o_inter[-1].data[b], bank.e_inter)
    s_v = expand_verb_scores(score_verb(out.o_verb[-1].data[b], bank.e_verb), tax)
    if cfg.enhance:
        s = fuse_inference(s_inter, s_v, cfg.alpha, zero_shot_enhance(v_g, bank.e_inter, cfg.topk))
    else:
        s = fuse_training(s_inter, s_v, cfg.alpha)
    return triplet_score(s, out.c_o[b], tax, cfg.triplet_score_mode)


def to_triplets(scores: np.ndarray, b_h: np.ndarray, b_o: np.ndarray, c_o: np.ndarray, tax: Taxonomy,
                width: int, height: int, cfg: InferenceConfig) -> list[TripletPrediction]:
    scale = np.array([width, height, width, height], dtype=np.float64)
    hx = cxcywh_to_xyxy(b_h) * scale
    ox = cxcywh_to_xyxy(b_o) * scale
    n_q, K_h = scores.shape
    flat = scores.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))
    if cfg.candidates_per_image is not None:
        order = order[: cfg.candidates_per_image]
    objs = tax.hoi_object
    trips = []
    for idx in order:
        q, n = divmod(int(idx), K_h)
        trips.append(TripletPrediction(tuple(hx[q]), tuple(ox[q]), n, float(flat[idx]), int(objs[n]), q))
    return triplet_nms(trips, cfg.nms_iou, cfg.keep_top)


def predict_batch(model: HOIModel, bundles: list[FeatureBundle], records: list[ImageRecord], bank: ClassifierBank,
                  tax: Taxonomy, cfg: InferenceConfig = InferenceConfig(), keep_traces: bool = False):
    """Triplet predictions per image (and the raw outputs for inspection)."""
    v_s = np.stack([fb.v_s for fb in bundles])
    v_d = np.stack([fb.v_d for fb in bundles])
    with no_grad():
        out = forward(model, v_s, v_d, keep_traces=keep_traces)
    preds = {}
    for b, (fb, rec) in enumerate(zip(bundles, records)):
        s = image_scores(out, b, fb.v_g, bank, tax, cfg)
        preds[rec.image_id] = to_triplets(s, out.b_h.data[b], out.b_o.data[b], out.c_o[b], tax,
                                          rec.width, rec.height, cfg)
    return preds, out


def ground_truth_annotations(manifest: DatasetManifest) -> dict:
    """Pixel xyxy annotations, one per (pair, HOI label)."""
    gts = {}
    for r in manifest.records:
        scale = np.array([r.width, r.height, r.width, r.height], dtype=np.float64)
        anns = []
        for t in r.triplets:
            h = tuple(cxcywh_to_xyxy(np.array(t.human_box)) * scale)
            o = tuple(cxcywh_to_xyxy(np.array(t.object_box)) * scale)
            anns.extend(HoiAnnotation(h, o, c) for c in t.hois)
        gts[r.image_id] = anns
    return gts


# ---------------------------------------------------------------------------
# predictions file: one JSON line per image, sorted by image id


def save_predictions(path, preds: dict) -> None:
    path = Path(path)
    lines = []
    for image_id in sorted(preds):
        row = {"image_id": image_id, "predictions": [_pred_dict(p) for p in preds[image_id]]}
        lines.append(json.dumps(row, sort_keys=True))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


def _pred_dict(p) -> dict:
    return p.to_dict() if hasattr(p, "to_dict") else dict(p)


def load_predictions(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            raise FormatError("invalid JSON", path=path, field=f"line {n}") from None
        check_fields(row, {"image_id", "predictions"}, set(), path, f"line {n}")
        preds = []
        for i, p in enumerate(row["predictions"]):
            where = f"line {n}.predictions[{i}]"
            check_fields(p, {"human_box", "object_box", "category", "score"}, set(), path, where)
            try:
                preds.append(TripletPrediction(tuple(float(v) for v in p["human_box"]),
                                               tuple(float(v) for v in p["object_box"]),
                                               int(p["category"]), float(p["score"])))
            except (TypeError, ValueError):
                raise FormatError("malformed prediction", path=path, field=where) from None
            if len(preds[-1].human_box) != 4 or len(preds[-1].object_box) != 4:
                raise FormatError("boxes need four coordinates", path=path, field=where)
        out[str(row["image_id"])] = preds
    return out


def perfect_predictions(manifest: DatasetManifest) -> dict:
    """Every ground-truth annotation as a score-1 prediction."""
    return {k: [TripletPrediction(a.human_box, a.object_box, a.category, 1.0) for a in v]
            for k, v in ground_truth_annotations(manifest).items()}
