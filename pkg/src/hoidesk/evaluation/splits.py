"""Zero-shot category splits and the coverage-preserving validation split."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import BadMode, FileError, FormatError, Infeasible
from ..taxonomy import Taxonomy, read_json

MODES = ("rf-uc", "nf-uc", "uo", "uv", "uc-file")
DEFAULT_UNSEEN = 120
DEFAULT_UNSEEN_OBJECTS = 12
DEFAULT_UNSEEN_VERBS = 20


@dataclass(frozen=True)
class SplitSpec:
    mode: str
    unseen: tuple
    seen: tuple
    seed: int | None = None
    selected: tuple = field(default=())  # objects (uo) or verbs (uv) picked at random

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "unseen": list(self.unseen),
                "seen": list(self.seen), "selected": list(self.selected)}


def _normalise_mode(mode: str) -> str:
    m = mode.lower().replace("_", "-")
    if m not in MODES:
        raise BadMode(f"unknown split mode {mode!r}; expected one of {MODES}")
    return m


def construct_split(mode: str, tax: Taxonomy, seed: int = 0, n_unseen: int | None = None,
                    path=None) -> SplitSpec:
    """Unseen/seen HOI-category partition.

    ``n_unseen`` means categories for rf-uc/nf-uc, objects for uo and verbs for uv.
    """
    mode = _normalise_mode(mode)
    K = tax.num_hois
    ids = np.arange(K)
    counts = np.asarray(tax.counts)
    selected: tuple = ()
    if mode in ("rf-uc", "nf-uc"):
        n = DEFAULT_UNSEEN if n_unseen is None else int(n_unseen)
        if not 0 <= n <= K:
            raise BadMode(f"n_unseen={n} outside [0, {K}]")
        key = counts if mode == "rf-uc" else -counts
        unseen = np.lexsort((ids, key))[:n]
    elif mode in ("uo", "uv"):
        pool = tax.num_objects if mode == "uo" else tax.num_verbs
        n = (DEFAULT_UNSEEN_OBJECTS if mode == "uo" else DEFAULT_UNSEEN_VERBS) if n_unseen is None else int(n_unseen)
        if not 0 <= n <= pool:
            raise BadMode(f"cannot select {n} of {pool}")
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(pool, size=n, replace=False))
        selected = tuple(int(x) for x in picked)
        attr = tax.hoi_object if mode == "uo" else tax.hoi_verb
        unseen = ids[np.isin(attr, picked)]
    else:
        if path is None:
            raise FileError("uc-file mode needs a split file")
        data = read_json(path)
        if not isinstance(data, list) or not all(isinstance(x, int) for x in data):
            raise FormatError("split file must be a JSON array of category ids", path=path, field="<root>")
        bad = [x for x in data if not 0 <= x < K]
        if bad:
            raise FormatError(f"category ids out of range: {bad[:5]}", path=path, field="<root>")
        unseen = np.array(sorted(set(data)), dtype=np.int64)
    unseen_set = set(int(x) for x in unseen)
    return SplitSpec(
        mode=mode,
        unseen=tuple(sorted(unseen_set)),
        seen=tuple(int(x) for x in ids if int(x) not in unseen_set),
        seed=seed if mode in ("uo", "uv") else None,
        selected=selected,
    )


def make_validation_split(
    image_labels: Mapping[str, Sequence[int]],
    seed: int,
    n_val: int | None = None,
    val_fraction: float | None = None,
    classes: Sequence[int] | None = None,
) -> tuple[list[str], list[str]]:
    """Random image split keeping >= 1 instance of every class in the new training set.

    Images are visited in a seeded random order and moved to validation only if
    every class they carry keeps at least one instance among the remaining
    training images.
    """
    ids = sorted(image_labels)
    total = Counter(c for i in ids for c in image_labels[i])
    required = sorted(total) if classes is None else sorted(set(classes))
    absent = [c for c in required if total.get(c, 0) == 0]
    if absent:
        raise Infeasible(f"classes without any training instance: {absent[:10]}")
    if n_val is None:
        frac = 0.4 if val_fraction is None else float(val_fraction)
        n_val = int(round(frac * len(ids)))
    if not 0 <= n_val <= len(ids):
        raise Infeasible(f"validation size {n_val} outside [0, {len(ids)}]")
    remaining = Counter(total)
    req = set(required)
    rng = np.random.default_rng(seed)
    val: list[str] = []
    for pos in rng.permutation(len(ids)):
        if len(val) == n_val:
            break
        img = ids[pos]
        need = Counter(image_labels[img])
        if all(remaining[c] - k >= 1 for c, k in need.items() if c in req):
            remaining.subtract(need)
            val.append(img)
    if len(val) < n_val:
        raise Infeasible(f"only {len(val)} of {n_val} images can move to validation without losing a class")
    vset = set(val)
    return sorted(val), [i for i in ids if i not in vset]
