"""Bipartite assignment of ground truth to queries and the set-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import Infeasible, InvalidBox, NonFinite, ShapeMismatch
from .evaluation.boxes import cxcywh_to_xyxy, pairwise_giou
from .taxonomy import Taxonomy
from .tensor import (
    Tensor,
    abs_,
    clamp,
    cross_entropy,
    div,
    getitem,
    maximum,
    minimum,
    mul,
    reshape,
    sigmoid_focal_loss,
    sub,
    sum_,
)


@dataclass
class GroundTruthTriplet:
    """One annotated human-object pair. Boxes are normalised (cx, cy, w, h)."""

    human_box: tuple
    object_box: tuple
    object: int
    hois: tuple
    verbs: tuple = ()

    def __post_init__(self):
        self.human_box = tuple(float(v) for v in self.human_box)
        self.object_box = tuple(float(v) for v in self.object_box)
        for name, b in (("human_box", self.human_box), ("object_box", self.object_box)):
            if len(b) != 4 or not np.all(np.isfinite(b)) or b[2] <= 0 or b[3] <= 0:
                raise InvalidBox(f"{name} {b} needs finite cx, cy and positive w, h")
        self.object = int(self.object)
        self.hois = tuple(sorted({int(h) for h in self.hois}))
        self.verbs = tuple(sorted({int(v) for v in self.verbs}))

    def validate(self, tax: Taxonomy) -> None:
        if not 0 <= self.object < tax.num_objects:
            raise ValueError(f"object {self.object} outside taxonomy")
        verbs = set()
        for h in self.hois:
            if not 0 <= h < tax.num_hois:
                raise ValueError(f"hoi {h} outside taxonomy")
            k, j = tax.hois[h]
            if j != self.object:
                raise ValueError(f"hoi {h} has object {j}, triplet has {self.object}")
            verbs.add(k)
        if self.verbs and set(self.verbs) != verbs:
            raise ValueError(f"verbs {self.verbs} disagree with hois {self.hois}")

    def with_verbs(self, tax: Taxonomy) -> "GroundTruthTriplet":
        return GroundTruthTriplet(self.human_box, self.object_box, self.object, self.hois,
                                  tuple(sorted({tax.hois[h][0] for h in self.hois})))

    def to_dict(self) -> dict:
        return {"human_box": list(self.human_box), "object_box": list(self.object_box),
                "object": self.object, "hois": list(self.hois), "verbs": list(self.verbs)}


# ---------------------------------------------------------------------------
# assignment


def _solve(c: np.ndarray) -> tuple[np.ndarray, float]:
    a = kernels.hungarian(c)
    return a, float(c[np.arange(len(a)), a].sum())


def _lexicographic(c: np.ndarray, assign: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest-in-lexicographic-order optimal assignment of rows to columns.

    Every optimal assignment uses only zero-reduced-cost edges under the
    optimal duals, so only tight edges left of the current choice are tried;
    each trial re-solves the remaining rows with the prefix fixed.
    """
    n, m = c.shape
    best = float(c[np.arange(n), assign].sum())
    scale = 1.0 + np.abs(c).max()
    tight = np.abs(c - u[:, None] - v[None, :]) <= 1e-9 * scale
    tol = 1e-10 * (1.0 + abs(best)) * n
    assign = assign.copy()
    used = np.zeros(m, dtype=bool)
    prefix = 0.0
    for g in range(n):
        for q in np.flatnonzero(tight[g, : assign[g]] & ~used[: assign[g]]):
            cols = np.flatnonzero(~used)
            cols = cols[cols != q]
            rest = c[g + 1:][:, cols]
            sub, sub_total = _solve(rest) if g + 1 < n else (np.zeros(0, dtype=np.int64), 0.0)
            if prefix + c[g, q] + sub_total <= best + tol:
                assign[g] = q
                assign[g + 1:] = cols[sub]
                break
        used[assign[g]] = True
        prefix += c[g, assign[g]]
    return assign


def hungarian(cost) -> np.ndarray:
    """Min-cost injective map from ground truth to queries.

    ``cost`` is (N_q, N_gt). Returns an int array of length N_gt holding the
    query index for every ground-truth column; among optimal assignments the
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeMismatch(f"cost must be 2-D, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFinite("cost matrix has non-finite entries")
    n_q, n_gt = cost.shape
    if n_gt > n_q:
        raise Infeasible(f"{n_gt} ground-truth pairs exceed {n_q} queries")
    if n_gt == 0:
        return np.zeros(0, dtype=np.int64)
    c = np.ascontiguousarray(cost.T)
    assign, u, v = kernels.hungarian_duals(c)
    return _lexicographic(c, assign, u, v)


def assignment_cost(cost, assign) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[q, g] for g, q in enumerate(assign)))


# ---------------------------------------------------------------------------
# costs and losses


@dataclass(frozen=True)
class LossConfig:
    box: float = 2.5
    giou: float = 1.0
    cls: float = 1.0
    hoi: float = 1.0
    no_object_weight: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # cosine scores live in [-1.5, 1.5]; the focal loss sees logit_scale * S_t
    logit_scale: float = 10.0
    rematch_aux: bool = False

    def scaled(self, **kw) -> "LossConfig":
        return LossConfig(**{**self.__dict__, **kw})


@dataclass
class Predictions:
    """Per-layer outputs for one image. Boxes cxcywh in [0, 1], class logits, training HOI scores."""

    b_h: Tensor
    b_o: Tensor
    cls_logits: Tensor
    s_t: Tensor


@dataclass
class CostTerms:
    box: np.ndarray
    giou: np.ndarray
    cls: np.ndarray
    hoi: np.ndarray
    total: np.ndarray


def _targets_arrays(targets: list[GroundTruthTriplet], num_hois: int):
    th = np.array([t.human_box for t in targets], dtype=np.float64).reshape(-1, 4)
    to = np.array([t.object_box for t in targets], dtype=np.float64).reshape(-1, 4)
    tm = np.array([t.object for t in targets], dtype=np.int64)
    multi = np.zeros((len(targets), num_hois))
    for i, t in enumerate(targets):
        multi[i, list(t.hois)] = 1.0
    return th, to, tm, multi


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def matching_cost(pred: Predictions, targets: list[GroundTruthTriplet], cfg: LossConfig = LossConfig()) -> CostTerms:
    """(N_q, N_gt) cost terms. The HOI term is the focal cost averaged over each target's positive labels."""
    b_h, b_o = np.asarray(pred.b_h.data), np.asarray(pred.b_o.data)
    logits, s_t = np.asarray(pred.cls_logits.data), np.asarray(pred.s_t.data)
    n_q = b_h.shape[0]
    if b_o.shape != b_h.shape or logits.shape[0] != n_q or s_t.shape[0] != n_q:
        raise ShapeMismatch("prediction tensors disagree on the number of queries")
    th, to, tm, multi = _targets_arrays(targets, s_t.shape[1])
    if len(targets) == 0:
        z = np.zeros((n_q, 0))
        return CostTerms(z, z, z, z, z)
    l1 = np.abs(b_h[:, None, :] - th[None]).sum(-1) + np.abs(b_o[:, None, :] - to[None]).sum(-1)
    g = (1.0 - pairwise_giou(cxcywh_to_xyxy(b_h), cxcywh_to_xyxy(th))) \
        + (1.0 - pairwise_giou(cxcywh_to_xyxy(b_o), cxcywh_to_xyxy(to)))
    cls = -_softmax_np(logits)[:, tm]
    p = _sigmoid_np(cfg.logit_scale * s_t)
    eps = 1e-12
    pos = cfg.focal_alpha * (1 - p) ** cfg.focal_gamma * -np.log(p + eps)
    neg = (1 - cfg.focal_alpha) * p ** cfg.focal_gamma * -np.log(1 - p + eps)
    hoi = (pos - neg) @ multi.T / np.maximum(multi.sum(1), 1.0)[None, :]
    total = cfg.box * l1 + cfg.giou * g + cfg.cls * cls + cfg.hoi * hoi
    return CostTerms(l1, g, cls, hoi, total)


def _xyxy(b: Tensor) -> tuple:
    cx, cy = getitem(b, (slice(None), 0)), getitem(b, (slice(None), 1))
    hw, hh = mul(getitem(b, (slice(None), 2)), 0.5), mul(getitem(b, (slice(None), 3)), 0.5)
    return sub(cx, hw), sub(cy, hh), cx + hw, cy + hh


def giou_aligned(a: Tensor, b: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted boxes (Tensor, cxcywh) and target boxes (cxcywh)."""
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bt = Tensor(cxcywh_to_xyxy(np.asarray(b, dtype=np.float64)), dtype=a.dtype)
    bx1, by1, bx2, by2 = (getitem(bt, (slice(None), i)) for i in range(4))
    iw = clamp(sub(minimum(ax2, bx2), maximum(ax1, bx1)), lo=0.0)
    ih = clamp(sub(minimum(ay2, by2), maximum(ay1, by1)), lo=0.0)
    inter = iw * ih
    area_a = sub(ax2, ax1) * sub(ay2, ay1)
    area_b = sub(bx2, bx1) * sub(by2, by1)
    union = sub(area_a + area_b, inter)
    hull = sub(maximum(ax2, bx2), minimum(ax1, bx1)) * sub(maximum(ay2, by2), minimum(ay1, by1))
    return sub(div(inter, union), div(sub(hull, union), hull))


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    per_layer: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"total": float(self.total.data), **{f"{k}": float(v) for k, v in self.weighted.items()},
                **{f"raw_{k}": float(v) for k, v in self.terms.items()}}


def _layer_terms(pred: Predictions, targets: list, assigns: list, num_objects: int, cfg: LossConfig) -> dict:
    """Loss terms for one layer of a batch: tensors carry a leading batch dim, ``targets`` is per image."""
    B, n_q = pred.b_h.shape[0], pred.b_h.shape[1]
    K_h = pred.s_t.shape[-1]
    bi = np.concatenate([np.full(len(a), b, dtype=np.int64) for b, a in enumerate(assigns)] or [np.zeros(0, np.int64)])
    qi = np.concatenate([np.asarray(a, dtype=np.int64) for a in assigns] or [np.zeros(0, np.int64)])
    flat_targets = [t for ts in targets for t in ts]
    th, to, tm, multi = _targets_arrays(flat_targets, K_h)
    n_gt = len(flat_targets)
    norm = max(n_gt, 1)
    cls_target = np.full((B, n_q), num_objects, dtype=np.int64)
    cls_target[bi, qi] = tm
    weight = np.ones(num_objects + 1)
    weight[num_objects] = cfg.no_object_weight
    cls = cross_entropy(reshape(pred.cls_logits, (B * n_q, num_objects + 1)), cls_target.reshape(-1), weight)
    hoi_target = np.zeros((B, n_q, K_h))
    hoi_target[bi, qi] = multi
    focal = sigmoid_focal_loss(mul(pred.s_t, cfg.logit_scale), hoi_target, cfg.focal_gamma, cfg.focal_alpha)
    hoi = mul(sum_(focal), 1.0 / norm)
    if n_gt == 0:
        zero = mul(sum_(pred.b_h), 0.0)
        return {"box": zero, "giou": zero, "cls": cls, "hoi": hoi}
    ph, po = getitem(pred.b_h, (bi, qi)), getitem(pred.b_o, (bi, qi))
    box = sum_(abs_(sub(ph, Tensor(th, dtype=ph.dtype)))) + sum_(abs_(sub(po, Tensor(to, dtype=po.dtype))))
    box = mul(box, 1.0 / norm)
    g = sum_(sub(1.0, giou_aligned(ph, th))) + sum_(sub(1.0, giou_aligned(po, to)))
    g = mul(g, 1.0 / norm)
    return {"box": box, "giou": g, "cls": cls, "hoi": hoi}


def _image_slice(pred: Predictions, b: int) -> Predictions:
    return Predictions(*(Tensor(np.asarray(t.data[b])) for t in (pred.b_h, pred.b_o, pred.cls_logits, pred.s_t)))


def compute_batch_losses(layers: list[Predictions], targets: list[list], num_objects: int,
                         cfg: LossConfig = LossConfig(), assigns: list | None = None):
    """Batched :func:`compute_losses`: tensors are (B, N_q, ...), ``targets`` holds one list per image.

    Matching runs per image on the final layer; the terms are normalised by
    the total number of ground-truth pairs in the batch.
    """
    if not layers:
        raise ValueError("need at least one layer of predictions")
    B = layers[-1].b_h.shape[0]
    if len(targets) != B:
        raise ShapeMismatch(f"{len(targets)} target lists for a batch of {B}")
    if assigns is None:
        assigns = [hungarian(matching_cost(_image_slice(layers[-1], b), targets[b], cfg).total) for b in range(B)]
    weights = {"box": cfg.box, "giou": cfg.giou, "cls": cfg.cls, "hoi": cfg.hoi}
    total = None
    raw = {k: 0.0 for k in weights}
    weighted = {k: 0.0 for k in weights}
    per_layer = []
    for i, pred in enumerate(layers):
        a = assigns
        if cfg.rematch_aux and i < len(layers) - 1:
            a = [hungarian(matching_cost(_image_slice(pred, b), targets[b], cfg).total) for b in range(B)]
        terms = _layer_terms(pred, targets, a, num_objects, cfg)
        layer_row = {}
        for k, t in terms.items():
            w = mul(t, weights[k])
            total = w if total is None else total + w
            raw[k] += float(t.data)
            weighted[k] += float(w.data)
            layer_row[k] = float(t.data)
        per_layer.append(layer_row)
    return LossBreakdown(total, raw, weighted, per_layer), assigns


def compute_losses(layers: list[Predictions], targets: list[GroundTruthTriplet], num_objects: int,
                   cfg: LossConfig = LossConfig(), assign: np.ndarray | None = None) -> tuple[LossBreakdown, np.ndarray]:
    """Sum of weighted loss terms over every layer (last entry is the final layer) for one image.

    The assignment is computed on the final layer and reused for the
    auxiliary layers unless ``cfg.rematch_aux`` is set.
    """
    if not layers:
        raise ValueError("need at least one layer of predictions")
    batched = [Predictions(*(reshape(t, (1,) + t.shape) for t in (p.b_h, p.b_o, p.cls_logits, p.s_t)))
               for p in layers]
    br, assigns = compute_batch_losses(batched, [targets], num_objects, cfg,
                                       None if assign is None else [np.asarray(assign)])
    return br, assigns[0]


__all__ = [
    "CostTerms",
    "GroundTruthTriplet",
    "LossBreakdown",
    "LossConfig",
    "Predictions",
    "assignment_cost",
    "compute_batch_losses",
    "compute_losses",
    "giou_aligned",
    "hungarian",
    "matching_cost",
]
