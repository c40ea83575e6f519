"""Object / verb / HOI-category taxonomy."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileError, FormatError

RARE_THRESHOLD = 10
TEMPLATE = "A photo of a person {verb} a {object}"


@dataclass
class Taxonomy:
    objects: list[str]
    verbs: list[str]
    hois: list[tuple[int, int]]  # (verb, object)
    counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.hois = [tuple(int(v) for v in h) for h in self.hois]
        if not self.counts:
            self.counts = [0] * len(self.hois)
        self.counts = [int(c) for c in self.counts]
        self.validate()

    def validate(self, path=None) -> None:
        if len(self.counts) != len(self.hois):
            raise FormatError("counts length differs from hois", path=path, field="counts")
        seen = set()
        for n, (k, j) in enumerate(self.hois):
            if not 0 <= k < len(self.verbs):
                raise FormatError(f"hoi {n} verb {k} out of range", path=path, field=f"hois[{n}]")
            if not 0 <= j < len(self.objects):
                raise FormatError(f"hoi {n} object {j} out of range", path=path, field=f"hois[{n}]")
            if (k, j) in seen:
                raise FormatError(f"duplicate hoi {(k, j)}", path=path, field=f"hois[{n}]")
            seen.add((k, j))
        if any(c < 0 for c in self.counts):
            raise FormatError("negative count", path=path, field="counts")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_hois(self) -> int:
        return len(self.hois)

    @property
    def hoi_verb(self) -> np.ndarray:
        return np.array([k for k, _ in self.hois], dtype=np.int64)

    @property
    def hoi_object(self) -> np.ndarray:
        return np.array([j for _, j in self.hois], dtype=np.int64)

    def hoi_index(self, verb: int, obj: int) -> int:
        return self.hois.index((verb, obj))

    def rare_mask(self, threshold: int = RARE_THRESHOLD) -> np.ndarray:
        return np.asarray(self.counts) < threshold

    def templates(self) -> list[str]:
        return [TEMPLATE.format(verb=self.verbs[k], object=self.objects[j]) for k, j in self.hois]

    def to_dict(self) -> dict:
        return {
            "objects": list(self.objects),
            "verbs": list(self.verbs),
            "hois": [[k, j] for k, j in self.hois],
            "counts": list(self.counts),
        }

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "Taxonomy":
        check_fields(d, {"objects", "verbs", "hois"}, {"counts"}, path)
        try:
            hois = [(int(h[0]), int(h[1])) for h in d["hois"]]
        except (TypeError, ValueError, IndexError):
            raise FormatError("hois must be [verb, object] pairs", path=path, field="hois") from None
        tax = cls.__new__(cls)
        tax.objects = [str(o) for o in d["objects"]]
        tax.verbs = [str(v) for v in d["verbs"]]
        tax.hois = hois
        tax.counts = [int(c) for c in d.get("counts", [0] * len(hois))]
        tax.validate(path)
        return tax

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "Taxonomy":
        return cls.from_dict(read_json(path), path=path)


def check_fields(d, required: set, optional: set, path=None, where: str = "") -> None:
    if not isinstance(d, dict):
        raise FormatError("expected an object", path=path, field=where or "<root>")
    prefix = f"{where}." if where else ""
    for key in d:
        if key not in required and key not in optional:
            raise FormatError(f"unknown field '{key}'", path=path, field=prefix + key)
    for key in required:
        if key not in d:
            raise FormatError(f"missing field '{key}'", path=path, field=prefix + key)


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_canonical(obj))
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at line {exc.lineno}", path=path, field=f"line {exc.lineno}") from None


def synthetic_taxonomy(num_objects: int, num_verbs: int, num_hois: int, seed: int = 0,
                       min_objects_per_verb: int = 1) -> Taxonomy:
    """Random taxonomy where every verb and object appears in at least one category."""
    if num_hois > num_objects * num_verbs:
        raise ValueError("more categories than verb/object pairs")
    if num_hois < max(num_verbs * min_objects_per_verb, num_objects):
        raise ValueError("too few categories to cover every verb and object")
    rng = np.random.default_rng(seed)
    pairs: list[tuple[int, int]] = []
    chosen = set()
    obj_cycle = list(rng.permutation(num_objects))
    for k in range(num_verbs):
        for _ in range(min_objects_per_verb):
            for _attempt in range(num_objects):
                if not obj_cycle:
                    obj_cycle = list(rng.permutation(num_objects))
                j = int(obj_cycle.pop())
                if (k, j) not in chosen:
                    break
            chosen.add((k, j))
            pairs.append((k, j))
    for j in range(num_objects):
        if not any(o == j for _, o in pairs):
            k = int(rng.integers(num_verbs))
            while (k, j) in chosen:
                k = int(rng.integers(num_verbs))
            chosen.add((k, j))
            pairs.append((k, j))
    remaining = [(k, j) for k in range(num_verbs) for j in range(num_objects) if (k, j) not in chosen]
    extra = rng.permutation(len(remaining))[: num_hois - len(pairs)]
    pairs.extend(remaining[i] for i in sorted(extra))
    pairs.sort()
    return Taxonomy(
        objects=[f"object{j}" for j in range(num_objects)],
        verbs=[f"verb{k}" for k in range(num_verbs)],
        hois=pairs,
    )
