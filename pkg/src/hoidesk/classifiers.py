"""Verb and HOI classifiers, zero-shot enhancement and score fusion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import KOutOfRange, MissingVerbData, ShapeMismatch, UnknownMapping, ZeroNorm
from .taxonomy import Taxonomy, check_fields, read_json, write_json
from .tensor import Tensor, add, getitem, hctf, matmul, mul, topk_indices

DEFAULT_ALPHA = 0.5
DEFAULT_TOPK = 10
TRIPLET_SCORE_MODES = ("squared", "product")


def unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n < eps):
        raise ZeroNorm("row with (near) zero norm")
    return x / n


@dataclass
class RegionFeatureStore:
    """Region features: HOI crops keyed by (verb, object), object crops keyed by object."""

    hoi: dict = field(default_factory=dict)
    obj: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        for v in list(self.hoi.values()) + list(self.obj.values()):
            return v.shape[1]
        return 0

    def add_hoi(self, verb: int, obj: int, feat) -> None:
        self.hoi.setdefault((int(verb), int(obj)), []).append(np.asarray(feat, dtype=np.float64))

    def add_object(self, obj: int, feat) -> None:
        self.obj.setdefault(int(obj), []).append(np.asarray(feat, dtype=np.float64))

    def frozen(self) -> "RegionFeatureStore":
        return RegionFeatureStore({k: np.atleast_2d(np.asarray(v)) for k, v in self.hoi.items()},
                                  {k: np.atleast_2d(np.asarray(v)) for k, v in self.obj.items()})

    def restrict(self, tax: Taxonomy, categories) -> "RegionFeatureStore":
        """Keep only HOI sets for the given category ids (objects untouched)."""
        keep = {tax.hois[c] for c in categories}
        return RegionFeatureStore({k: v for k, v in self.hoi.items() if k in keep}, dict(self.obj))

    def save(self, root) -> None:
        root = Path(root)
        fs = self.frozen()
        index = {"hoi": [], "object": []}
        if fs.hoi:
            keys = sorted(fs.hoi)
            hctf.save(root / "hoi.hctf", np.concatenate([fs.hoi[k] for k in keys]))
            index["hoi"] = [[k[0], k[1], len(fs.hoi[k])] for k in keys]
        if fs.obj:
            keys = sorted(fs.obj)
            hctf.save(root / "obj.hctf", np.concatenate([fs.obj[k] for k in keys]))
            index["object"] = [[k, len(fs.obj[k])] for k in keys]
        write_json(root / "index.json", index)

    @classmethod
    def load(cls, root) -> "RegionFeatureStore":
        root = Path(root)
        index = read_json(root / "index.json")
        check_fields(index, {"hoi", "object"}, set(), root / "index.json")
        store = cls()
        if index["hoi"]:
            arr, off = hctf.load(root / "hoi.hctf"), 0
            for k, j, n in index["hoi"]:
                store.hoi[(k, j)] = arr[off:off + n]
                off += n
        if index["object"]:
            arr, off = hctf.load(root / "obj.hctf"), 0
            for j, n in index["object"]:
                store.obj[j] = arr[off:off + n]
                off += n
        return store


def build_verb_classifier(store: RegionFeatureStore, tax: Taxonomy, fallback=None) -> np.ndarray:
    """Verb prototypes by visual semantic arithmetic.

    For every category (k, j) with data: normalised sum of its HOI-region
    features minus the normalised sum of object-j features. Each verb row is
    the normalised sum of its per-object differences. Verbs without data take
    the matching row of ``fallback`` (K_v x D) when given, else raise.
    """
    store = store.frozen()
    rows = [None] * tax.num_verbs
    obj_proto: dict[int, np.ndarray] = {}
    for k, j in tax.hois:
        feats = store.hoi.get((k, j))
        if feats is None or len(feats) == 0 or len(store.obj.get(j, ())) == 0:
            continue
        if j not in obj_proto:
            obj_proto[j] = unit_rows(store.obj[j].sum(axis=0))
        diff = unit_rows(feats.sum(axis=0)) - obj_proto[j]
        rows[k] = diff if rows[k] is None else rows[k] + diff
    missing = [k for k, r in enumerate(rows) if r is None]
    if missing and fallback is None:
        raise MissingVerbData(missing)
    if missing:
        fallback = np.asarray(fallback, dtype=np.float64)
        if fallback.shape[0] != tax.num_verbs:
            raise ShapeMismatch(f"fallback has {fallback.shape[0]} rows for {tax.num_verbs} verbs")
        for k in missing:
            rows[k] = fallback[k]
    return unit_rows(np.stack(rows))


def build_verb_classifier_sentence(verb_text_embeddings, num_verbs: int | None = None) -> np.ndarray:
    """Verb rows taken from per-verb sentence embeddings, unit-normalised."""
    emb = np.asarray(verb_text_embeddings, dtype=np.float64)
    if emb.ndim != 2 or (num_verbs is not None and emb.shape[0] != num_verbs):
        raise ShapeMismatch(f"sentence embeddings shape {emb.shape}, expected ({num_verbs}, D)")
    return unit_rows(emb)


def build_verb_classifier_hoi_average(e_inter, tax: Taxonomy) -> np.ndarray:
    """Each verb row is the normalised mean of the HOI text rows that share the verb."""
    e_inter = np.asarray(e_inter, dtype=np.float64)
    if e_inter.shape[0] != tax.num_hois:
        raise ShapeMismatch(f"E_inter has {e_inter.shape[0]} rows for {tax.num_hois} categories")
    verbs = tax.hoi_verb
    missing = [k for k in range(tax.num_verbs) if not np.any(verbs == k)]
    if missing:
        raise MissingVerbData(missing)
    return unit_rows(np.stack([e_inter[verbs == k].mean(axis=0) for k in range(tax.num_verbs)]))


VERB_BUILDERS = ("arithmetic", "sentence", "hoi-average")


@dataclass
class ClassifierBank:
    e_verb: np.ndarray
    e_inter: np.ndarray
    templates: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("e_verb", "e_inter"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ShapeMismatch(f"{name} must be 2-D")
            if not np.allclose(np.linalg.norm(arr, axis=1), 1.0, atol=1e-6):
                raise ValueError(f"{name} rows must be unit norm")
            setattr(self, name, arr)

    def save(self, root) -> None:
        root = Path(root)
        hctf.save(root / "e_verb.hctf", self.e_verb)
        hctf.save(root / "e_inter.hctf", self.e_inter)
        write_json(root / "bank.json", {"templates": list(self.templates)})

    @classmethod
    def load(cls, root) -> "ClassifierBank":
        root = Path(root)
        meta = read_json(root / "bank.json")
        check_fields(meta, {"templates"}, set(), root / "bank.json")
        return cls(hctf.load(root / "e_verb.hctf"), hctf.load(root / "e_inter.hctf"), meta["templates"])


# ---------------------------------------------------------------------------
# scoring


def _cosine(x, bank: np.ndarray, what: str):
    bank = np.asarray(bank)
    if x.shape[-1] != bank.shape[1]:
        raise ShapeMismatch(f"{what}: feature dim {x.shape[-1]} vs classifier dim {bank.shape[1]}")
    if isinstance(x, Tensor):
        return matmul(x, Tensor(bank.T, dtype=x.dtype))
    return np.asarray(x) @ bank.T


def score_inter(o_inter, e_inter):
    """Cosine HOI scores, (..., N_q, K_h). Tensor in, Tensor out; arrays in, array out."""
    return _cosine(o_inter, e_inter, "score_inter")


def score_verb(o_verb, e_verb):
    return _cosine(o_verb, e_verb, "score_verb")


def expand_verb_scores(s_v, tax: Taxonomy):
    """Map (..., K_v) verb scores to (..., K_h): column n takes the score of category n's verb."""
    if s_v.shape[-1] != tax.num_verbs:
        raise ShapeMismatch(f"verb scores have {s_v.shape[-1]} columns, taxonomy has {tax.num_verbs} verbs")
    idx = (Ellipsis, tax.hoi_verb)
    return getitem(s_v, idx) if isinstance(s_v, Tensor) else np.asarray(s_v)[idx]


def zero_shot_enhance(v_g, e_inter, k: int) -> np.ndarray:
    """Global-feature HOI logits with everything outside the top ``k`` set to zero."""
    e_inter = np.asarray(e_inter, dtype=np.float64)
    v_g = np.asarray(v_g, dtype=np.float64)
    K_h = e_inter.shape[0]
    if not 0 <= int(k) <= K_h:
        raise KOutOfRange(f"k={k} outside [0, {K_h}]")
    if v_g.shape[-1] != e_inter.shape[1]:
        raise ShapeMismatch(f"V_g dim {v_g.shape[-1]} vs E_inter dim {e_inter.shape[1]}")
    raw = e_inter @ v_g
    out = np.zeros_like(raw)
    keep = topk_indices(raw, int(k))
    out[keep] = raw[keep]
    return out


def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def fuse_training(s_inter, s_v_expanded, alpha: float = DEFAULT_ALPHA):
    """S_inter + alpha * S_v."""
    _check_same(s_inter, s_v_expanded, "fuse_training")
    if isinstance(s_inter, Tensor) or isinstance(s_v_expanded, Tensor):
        return add(s_inter, mul(s_v_expanded, float(alpha)))
    return np.asarray(s_inter) + float(alpha) * np.asarray(s_v_expanded)


def fuse_inference(s_inter, s_v_expanded, alpha: float, s_zs):
    """S_inter + alpha * S_v + S_zs, with S_zs (K_h,) broadcast over queries."""
    s_t = fuse_training(s_inter, s_v_expanded, alpha)
    s_zs = np.asarray(s_zs.data if isinstance(s_zs, Tensor) else s_zs, dtype=np.float64)
    if s_zs.shape != tuple(s_t.shape[-s_zs.ndim:]):
        raise ShapeMismatch(f"S_zs {s_zs.shape} does not broadcast over {tuple(s_t.shape)}")
    if isinstance(s_t, Tensor):
        return add(s_t, Tensor(s_zs, dtype=s_t.dtype))
    return s_t + s_zs


def triplet_score(s_i, c_o, tax: Taxonomy, mode: str = "squared") -> np.ndarray:
    """Per-(query, category) triplet score from fused HOI logits and object probabilities.

    ``squared``: S_i + C_o[m]^2 (the object probability of the category's object, squared and added).
    ``product``: S_i * C_o[m].
    """
    s_i = np.asarray(s_i, dtype=np.float64)
    c_o = np.asarray(c_o, dtype=np.float64)
    if s_i.shape[-1] != tax.num_hois:
        raise ShapeMismatch(f"S_i has {s_i.shape[-1]} columns for {tax.num_hois} categories")
    objs = tax.hoi_object
    if objs.size and (objs.max() >= c_o.shape[-1] or objs.min() < 0):
        raise UnknownMapping("category refers to an object without a score column")
    p = c_o[..., objs]
    if mode == "squared":
        return s_i + p * p
    if mode == "product":
        return s_i * p
    raise ValueError(f"triplet_score_mode must be one of {TRIPLET_SCORE_MODES}")

