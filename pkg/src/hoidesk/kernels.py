"""Hot loops: assignment, box overlaps, triplet suppression, detection matching.

Each kernel exists twice. The ``*_loop`` body is plain Python over arrays and
is compiled with numba; the ``*_numpy`` twin is a vectorised fallback. The
public names pick one according to ``HOIDESK_DISABLE_NUMBA``.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# assignment: shortest augmenting path with dual potentials, O(n^2 m)


def _hungarian_loop(cost):
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            out[p[j] - 1] = j - 1
    return out, u[1:].copy(), v[1:].copy()


def hungarian_numpy(cost: np.ndarray):
    """Row -> column assignment for an n x m cost (n <= m), inner scans vectorised.

    Also returns the row and column dual potentials (reduced costs are
    ``cost - u[:, None] - v[None, :] >= 0``, zero on the assignment).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    cols = np.nonzero(p[1:])[0]
    out[p[cols + 1] - 1] = cols
    return out, u[1:].copy(), v[1:].copy()


# ---------------------------------------------------------------------------
# axis-aligned boxes (x1, y1, x2, y2)


def _iou_matrix_loop(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def iou_matrix_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    pos = (iw > 0.0) & (ih > 0.0)
    inter = np.where(pos, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(pos & (union > 0.0), inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


# ---------------------------------------------------------------------------
# per-category greedy suppression on (human, object) box pairs


def _pair_overlap(h, o, i, j):
    best = 1.0
    for boxes in (h, o):
        iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
        ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        inter = iw * ih
        union = ((boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
                 + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter)
        iou = inter / union if union > 0.0 else 0.0
        if iou < best:
            best = iou
    return best


def triplet_nms_numpy(hboxes, oboxes, categories, order, thresh) -> np.ndarray:
    hboxes = np.asarray(hboxes, dtype=np.float64).reshape(-1, 4)
    oboxes = np.asarray(oboxes, dtype=np.float64).reshape(-1, 4)
    categories = np.asarray(categories)
    order = np.asarray(order, dtype=np.int64)
    keep = np.zeros(len(hboxes), dtype=bool)
    cat_sorted = categories[order]
    for c in np.unique(cat_sorted):
        idx = order[cat_sorted == c]
        ov = np.minimum(iou_matrix_numpy(hboxes[idx], hboxes[idx]), iou_matrix_numpy(oboxes[idx], oboxes[idx]))
        alive = np.ones(len(idx), dtype=bool)
        for a in range(len(idx)):
            if not alive[a]:
                continue
            keep[idx[a]] = True
            later = np.arange(len(idx)) > a
            alive &= ~(later & (ov[a] > thresh))
    return keep


# ---------------------------------------------------------------------------
# greedy detection matching inside one image for one category


def match_image_numpy(pred_h, pred_o, gt_h, gt_o, thresh) -> np.ndarray:
    n, m = len(pred_h), len(gt_h)
    tp = np.zeros(n, dtype=bool)
    if n == 0 or m == 0:
        return tp
    ov = np.minimum(iou_matrix_numpy(pred_h, gt_h), iou_matrix_numpy(pred_o, gt_o))
    ok = ov > thresh
    taken = np.zeros(m, dtype=bool)
    for i in range(n):
        cand = np.where(ok[i] & ~taken, ov[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] > thresh:
            taken[j] = True
            tp[i] = True
    return tp


hungarian_jit = njit(_hungarian_loop)
iou_matrix_jit = njit(_iou_matrix_loop)
_pair_overlap_jit = njit(_pair_overlap)


def _nms_impl(hboxes, oboxes, categories, order, thresh):
    n = order.shape[0]
    keep = np.zeros(hboxes.shape[0], dtype=np.bool_)
    dead = np.zeros(hboxes.shape[0], dtype=np.bool_)
    for a in range(n):
        i = order[a]
        if dead[i]:
            continue
        keep[i] = True
        for b in range(a + 1, n):
            j = order[b]
            if dead[j] or categories[j] != categories[i]:
                continue
            if _pair_overlap_jit(hboxes, oboxes, i, j) > thresh:
                dead[j] = True
    return keep


def _match_impl(pred_h, pred_o, gt_h, gt_o, thresh):
    """``pred_*`` must already be in descending confidence order."""
    n = pred_h.shape[0]
    m = gt_h.shape[0]
    tp = np.zeros(n, dtype=np.bool_)
    taken = np.zeros(m, dtype=np.bool_)
    ih = iou_matrix_jit(pred_h, gt_h)
    io = iou_matrix_jit(pred_o, gt_o)
    for i in range(n):
        best = -1.0
        arg = -1
        for j in range(m):
            if taken[j]:
                continue
            if ih[i, j] > thresh and io[i, j] > thresh:
                ov = min(ih[i, j], io[i, j])
                if ov > best:
                    best = ov
                    arg = j
        if arg >= 0:
            taken[arg] = True
            tp[i] = True
    return tp


triplet_nms_jit = njit(_nms_impl)
match_image_jit = njit(_match_impl)


def _as_boxes(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


def hungarian_duals(cost: np.ndarray):
    """(assignment, u, v) for an n x m cost with n <= m."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise ValueError(f"need an n x m cost with n <= m, got {cost.shape}")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(cost.shape[1])
    return hungarian_jit(cost) if USE_NUMBA else hungarian_numpy(cost)


def hungarian(cost: np.ndarray) -> np.ndarray:
    return hungarian_duals(cost)[0]


def iou_matrix(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    return iou_matrix_jit(a, b) if USE_NUMBA else iou_matrix_numpy(a, b)


def triplet_nms_keep(hboxes, oboxes, categories, order, thresh: float) -> np.ndarray:
    h, o = _as_boxes(hboxes), _as_boxes(oboxes)
    cats = np.ascontiguousarray(categories, dtype=np.int64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    if USE_NUMBA:
        return triplet_nms_jit(h, o, cats, order, float(thresh))
    return triplet_nms_numpy(h, o, cats, order, float(thresh))


def match_image(pred_h, pred_o, gt_h, gt_o, thresh: float = 0.5) -> np.ndarray:
    args = (_as_boxes(pred_h), _as_boxes(pred_o), _as_boxes(gt_h), _as_boxes(gt_o), float(thresh))
    return match_image_jit(*args) if USE_NUMBA else match_image_numpy(*args)
