"""Dataset files, training-set subsampling and the synthetic world generator.

Layout under a dataset root::

    taxonomy.json
    world.json                       generator config (synthetic data only)
    annotations/{split}.jsonl        one image record per line
    features/{image_id}.{vs,vd,vg}.hctf
    classifiers/*.hctf               text-embedding fixtures
    regions/                         region feature store
    splits/*.json
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifiers import RegionFeatureStore, unit_rows
from .errors import BadConfig, BadFraction, FileError, FormatError
from .matching import GroundTruthTriplet
from .taxonomy import Taxonomy, check_fields, read_json, synthetic_taxonomy, write_json
from .tensor import hctf

FEATURE_KINDS = ("vs", "vd", "vg")
BOX_CODE_DIMS = 4


@dataclass
class FeatureBundle:
    """Per-image inputs: CLIP spatial map (H, W, C_s), detection map (H', W', C_e), global CLIP vector (D,)."""

    v_s: np.ndarray
    v_d: np.ndarray
    v_g: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    triplets: list
    features: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "width": self.width, "height": self.height,
                "features": dict(self.features), "triplets": [t.to_dict() for t in self.triplets]}

    @classmethod
    def from_dict(cls, d: dict, path=None, line: int | None = None) -> "ImageRecord":
        where = f"line {line}" if line is not None else ""
        check_fields(d, {"image_id", "width", "height", "triplets"}, {"features"}, path, where)
        pre = f"{where}." if where else ""
        triplets = []
        for i, t in enumerate(d["triplets"]):
            tw = f"{pre}triplets[{i}]"
            check_fields(t, {"human_box", "object_box", "object", "hois"}, {"verbs"}, path, tw)
            try:
                triplets.append(GroundTruthTriplet(t["human_box"], t["object_box"], t["object"], t["hois"],
                                                   t.get("verbs", ())))
            except (TypeError, ValueError) as exc:
                raise FormatError(str(exc), path=path, field=tw) from None
        feats = d.get("features", {})
        if not isinstance(feats, dict) or set(feats) - set(FEATURE_KINDS):
            raise FormatError("features must map vs/vd/vg to paths", path=path, field=f"{pre}features")
        return cls(str(d["image_id"]), int(d["width"]), int(d["height"]), triplets, dict(feats))


@dataclass
class DatasetManifest:
    root: Path
    split: str
    taxonomy: Taxonomy
    records: list

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def validate(self, check_files: bool = True) -> None:
        ids = set()
        for r in self.records:
            if r.image_id in ids:
                raise FormatError(f"duplicate image id {r.image_id}", path=self.annotation_path, field="image_id")
            ids.add(r.image_id)
            for t in r.triplets:
                try:
                    t.validate(self.taxonomy)
                except ValueError as exc:
                    raise FormatError(str(exc), path=self.annotation_path, field=f"{r.image_id}.triplets") from None
            if check_files:
                for kind, rel in r.features.items():
                    if not (self.root / rel).is_file():
                        raise FileError(f"missing feature file {self.root / rel} ({kind}) for {r.image_id}")

    @property
    def annotation_path(self) -> Path:
        return Path(self.root) / "annotations" / f"{self.split}.jsonl"

    def with_records(self, records) -> "DatasetManifest":
        return DatasetManifest(self.root, self.split, self.taxonomy, list(records))

    def instance_counts(self) -> np.ndarray:
        counts = np.zeros(self.taxonomy.num_hois, dtype=np.int64)
        for r in self.records:
            for t in r.triplets:
                counts[list(t.hois)] += 1
        return counts

    def save(self) -> None:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        path = self.annotation_path
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(line + "\n" for line in lines))
        except OSError as exc:
            raise FileError(f"cannot write {path}: {exc}") from exc


def load_manifest(root, split: str, check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    tax = Taxonomy.load(root / "taxonomy.json")
    path = root / "annotations" / f"{split}.jsonl"
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    records = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError:
            raise FormatError("invalid JSON", path=path, field=f"line {n}") from None
        records.append(ImageRecord.from_dict(d, path=path, line=n))
    man = DatasetManifest(root, split, tax, records)
    man.validate(check_files)
    return man


def load_features(manifest: DatasetManifest, record: ImageRecord) -> FeatureBundle:
    arrs = {k: hctf.load(Path(manifest.root) / record.features[k]) for k in FEATURE_KINDS}
    v_g = arrs["vg"].reshape(-1)
    return FeatureBundle(arrs["vs"], arrs["vd"], v_g / np.linalg.norm(v_g))


def subsample_training(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Uniform image subset of size round(fraction * N).

    One permutation per seed is drawn over the sorted image ids and the
    subset is its prefix, so smaller fractions are nested in larger ones.
    """
    if not (isinstance(fraction, (int, float)) and 0.0 < fraction <= 1.0):
        raise BadFraction(f"fraction {fraction} outside (0, 1]")
    by_id = sorted(manifest.records, key=lambda r: r.image_id)
    n = len(by_id)
    take = int(math.floor(fraction * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)[:take]
    keep = {by_id[i].image_id for i in order}
    return manifest.with_records([r for r in manifest.records if r.image_id in keep])


def restrict_categories(manifest: DatasetManifest, categories) -> DatasetManifest:
    """Drop triplets whose HOI labels fall outside ``categories``; drop images left empty."""
    allowed = {int(c) for c in categories}
    out = []
    for r in manifest.records:
        trips = []
        for t in r.triplets:
            hois = [h for h in t.hois if h in allowed]
            if hois:
                trips.append(GroundTruthTriplet(t.human_box, t.object_box, t.object, hois,
                                                sorted({manifest.taxonomy.hois[h][0] for h in hois})))
        if trips:
            out.append(ImageRecord(r.image_id, r.width, r.height, trips, dict(r.features)))
    return manifest.with_records(out)


# ---------------------------------------------------------------------------
# synthetic world


@dataclass
class SyntheticConfig:
    num_objects: int = 8
    num_verbs: int = 6
    num_hois: int | None = None
    objects_per_verb: int = 2
    antipodal_objects: bool = False
    dim: int = 32
    clip_dim: int | None = None
    det_dim: int = 16
    grid: int = 7
    det_grid: int | None = None
    sigma: float = 0.05
    background: float = 0.02
    num_train: int = 20
    num_test: int = 10
    pairs_per_image: int = 1
    min_instances: int = 0
    zipf: float = 1.0
    image_size: tuple = (640, 480)
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        c = self
        if c.num_objects < 1 or c.num_verbs < 1:
            raise BadConfig("need at least one object and one verb")
        if c.dim < 4:
            raise BadConfig("dim must be >= 4")
        if self.clip_dim_resolved < c.dim:
            raise BadConfig("clip_dim must be >= dim")
        if c.det_dim < BOX_CODE_DIMS + 2:
            raise BadConfig(f"det_dim must be >= {BOX_CODE_DIMS + 2}")
        if c.grid < 1 or self.det_grid_resolved < 1:
            raise BadConfig("grids must be positive")
        if c.sigma < 0 or c.background < 0:
            raise BadConfig("noise scales must be non-negative")
        if c.num_train < 0 or c.num_test < 0 or c.pairs_per_image < 1 or c.min_instances < 0:
            raise BadConfig("scene counts out of range")
        if c.antipodal_objects and c.num_objects % 2:
            raise BadConfig("antipodal objects need an even object count")
        if c.num_train and c.min_instances * self.num_hois_resolved > c.num_train * c.pairs_per_image:
            raise BadConfig("min_instances * num_hois exceeds the number of training pairs")

    @property
    def clip_dim_resolved(self) -> int:
        return self.dim if self.clip_dim is None else self.clip_dim

    @property
    def det_grid_resolved(self) -> int:
        return self.grid if self.det_grid is None else self.det_grid

    @property
    def num_hois_resolved(self) -> int:
        if self.antipodal_objects:
            return 2 * max(self.num_verbs, self.num_objects // 2)
        if self.num_hois is not None:
            return self.num_hois
        return min(self.num_objects * self.num_verbs,
                   max(3 * max(self.num_objects, self.num_verbs), self.num_verbs * self.objects_per_verb))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "SyntheticConfig":
        names = set(cls.__dataclass_fields__)
        check_fields(d, set(), names, path)
        return cls(**d)


@dataclass
class Scene:
    image_id: str
    triplets: list
    hoi_feats: list  # one D-vector per triplet (its union-region feature)


@dataclass
class SyntheticWorld:
    config: SyntheticConfig
    taxonomy: Taxonomy
    object_protos: np.ndarray
    verb_protos: np.ndarray
    det_codes: np.ndarray  # (K_o + 1, C_e - 4); last row is the human code
    lift: np.ndarray  # (D, C_s) maps CLIP-space features onto the spatial map channels
    train: list
    test: list
    features: dict
    regions: RegionFeatureStore
    e_inter: np.ndarray
    verb_text: np.ndarray

    @property
    def clip_proj(self) -> np.ndarray:
        """(C_s, D) fixture for the CLIP-space projection (left inverse of ``lift``)."""
        return self.lift.T.copy()

    def records(self, split: str) -> list:
        scenes = self.train if split == "train" else self.test
        w, h = self.config.image_size
        return [ImageRecord(s.image_id, w, h, list(s.triplets),
                            {k: f"features/{s.image_id}.{k}.hctf" for k in FEATURE_KINDS}) for s in scenes]

    def manifest(self, split: str, root=".") -> DatasetManifest:
        return DatasetManifest(Path(root), split, self.taxonomy, self.records(split))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _frame(rng, n: int, dim: int) -> np.ndarray:
    """n unit rows, orthonormal when dim allows."""
    g = rng.standard_normal((dim, max(n, 1)))
    if n <= dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))[None, :]
        return q[:, :n].T.copy()
    return unit_rows(g[:, :n].T)


def _antipodal_taxonomy(num_objects: int, num_verbs: int) -> Taxonomy:
    half = num_objects // 2
    pairs = set()
    for k in range(max(num_verbs, half)):
        verb, p = k % num_verbs, k % half
        pairs.update({(verb, 2 * p), (verb, 2 * p + 1)})
    pairs = sorted(pairs)
    return Taxonomy([f"object{j}" for j in range(num_objects)], [f"verb{k}" for k in range(num_verbs)], pairs)


def _layout(rng, slot: int, n_slots: int):
    """Human and object boxes (cx, cy, w, h) inside one horizontal slot."""
    sw = 1.0 / n_slots
    hcx, ocx = rng.uniform(0.25, 0.4), rng.uniform(0.6, 0.75)
    if rng.random() < 0.5:
        hcx, ocx = 1.0 - hcx, 1.0 - ocx
    human = [hcx, rng.uniform(0.4, 0.6), rng.uniform(0.2, 0.35), rng.uniform(0.4, 0.7)]
    obj = [ocx, rng.uniform(0.4, 0.7), rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.35)]
    out = []
    for b in (human, obj):
        cx, cy, w, h = b
        x1, x2 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
        y1, y2 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
        x1, x2 = (slot + x1) * sw, (slot + x2) * sw
        out.append(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
    return out


def _token_mask(box, grid: int) -> np.ndarray:
    cx, cy, w, h = box
    centers = (np.arange(grid) + 0.5) / grid
    inside_x = (centers >= cx - w / 2) & (centers <= cx + w / 2)
    inside_y = (centers >= cy - h / 2) & (centers <= cy + h / 2)
    mask = inside_y[:, None] & inside_x[None, :]
    mask[min(int(cy * grid), grid - 1), min(int(cx * grid), grid - 1)] = True
    return mask


def _union(a, b):
    x1 = min(a[0] - a[2] / 2, b[0] - b[2] / 2)
    x2 = max(a[0] + a[2] / 2, b[0] + b[2] / 2)
    y1 = min(a[1] - a[3] / 2, b[1] - b[3] / 2)
    y2 = max(a[1] + a[3] / 2, b[1] + b[3] / 2)
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def box_code(box) -> np.ndarray:
    """Inverse-sigmoid of the normalised box, the value planted on detection tokens."""
    b = np.clip(np.asarray(box, dtype=np.float64), 1e-3, 1 - 1e-3)
    return np.log(b / (1 - b))


def _category_draws(rng, cfg: SyntheticConfig, K_h: int, total: int) -> np.ndarray:
    base = np.repeat(np.arange(K_h), cfg.min_instances)
    rank = rng.permutation(K_h)
    weights = (rank + 1.0) ** (-cfg.zipf)
    extra = rng.choice(K_h, size=total - base.size, p=weights / weights.sum())
    return rng.permutation(np.concatenate([base, extra]).astype(np.int64))


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticWorld:
    """Build a world whose features plant the prototypes that the classifiers should recover."""
    rng = np.random.default_rng(cfg.seed)
    K_o, K_v, D = cfg.num_objects, cfg.num_verbs, cfg.dim
    C_s, C_e = cfg.clip_dim_resolved, cfg.det_dim
    if cfg.antipodal_objects:
        tax = _antipodal_taxonomy(K_o, K_v)
        frame = _frame(rng, K_o // 2 + K_v, D)
        obj = np.empty((K_o, D))
        obj[0::2], obj[1::2] = frame[: K_o // 2], -frame[: K_o // 2]
        verb = frame[K_o // 2:]
    else:
        try:
            tax = synthetic_taxonomy(K_o, K_v, cfg.num_hois_resolved, seed=cfg.seed,
                                     min_objects_per_verb=cfg.objects_per_verb)
        except ValueError as exc:
            raise BadConfig(str(exc)) from None
        frame = _frame(rng, K_o + K_v, D)
        obj, verb = frame[:K_o], frame[K_o:]
    det_codes = _frame(rng, K_o + 1, C_e - BOX_CODE_DIMS)
    lift = np.eye(D, C_s) if C_s == D else _frame(rng, D, C_s)
    K_h = tax.num_hois

    def hoi_feature(n: int) -> np.ndarray:
        k, j = tax.hois[n]
        return _unit(obj[j] + verb[k] + rng.normal(0.0, cfg.sigma, D))

    scenes: dict[str, list] = {"train": [], "test": []}
    regions = RegionFeatureStore()
    features = {}
    G, Gd = cfg.grid, cfg.det_grid_resolved
    for split, n_images in (("train", cfg.num_train), ("test", cfg.num_test)):
        total = n_images * cfg.pairs_per_image
        if split == "train":
            cats = _category_draws(rng, cfg, K_h, total) if total else np.zeros(0, dtype=np.int64)
        else:
            cats = np.concatenate([rng.permutation(K_h) for _ in range(-(-total // K_h))])[:total] if total else \
                np.zeros(0, dtype=np.int64)
        for i in range(n_images):
            image_id = f"{split}_{i:05d}"
            v_s = rng.normal(0.0, cfg.background, (G, G, C_s))
            v_d = rng.normal(0.0, cfg.background, (Gd, Gd, C_e))
            trips, feats = [], []
            for slot in range(cfg.pairs_per_image):
                n = int(cats[i * cfg.pairs_per_image + slot])
                k, j = tax.hois[n]
                hbox, obox = _layout(rng, slot, cfg.pairs_per_image)
                f = hoi_feature(n)
                trips.append(GroundTruthTriplet(hbox, obox, j, (n,), (k,)))
                feats.append(f)
                v_s[_token_mask(_union(hbox, obox), G)] += f @ lift
                for box, code in ((hbox, det_codes[K_o]), (obox, det_codes[j])):
                    m = _token_mask(box, Gd)
                    v_d[m, : C_e - BOX_CODE_DIMS] = code + rng.normal(0.0, cfg.background, (m.sum(), C_e - BOX_CODE_DIMS))
                    v_d[m, C_e - BOX_CODE_DIMS:] = box_code(box)
                if split == "train":
                    regions.add_hoi(k, j, f)
                    regions.add_object(j, _unit(obj[j] + rng.normal(0.0, cfg.sigma, D)))
            v_g = _unit(np.mean(feats, axis=0))
            scenes[split].append(Scene(image_id, trips, feats))
            features[image_id] = FeatureBundle(v_s, v_d, v_g)
    counts = np.zeros(K_h, dtype=np.int64)
    for s in scenes["train"]:
        for t in s.triplets:
            counts[list(t.hois)] += 1
    tax = Taxonomy(tax.objects, tax.verbs, tax.hois, counts.tolist())
    e_inter = unit_rows(np.stack([obj[j] + verb[k] for k, j in tax.hois]))
    return SyntheticWorld(cfg, tax, obj, verb, det_codes, lift, scenes["train"], scenes["test"], features,
                          regions.frozen(), e_inter, verb.copy())


def write_world(world: SyntheticWorld, root) -> dict:
    """Write every file of the dataset layout; returns the split manifests."""
    root = Path(root)
    world.taxonomy.save(root / "taxonomy.json")
    write_json(root / "world.json", world.config.to_dict())
    for image_id in sorted(world.features):
        fb = world.features[image_id]
        hctf.save(root / "features" / f"{image_id}.vs.hctf", fb.v_s)
        hctf.save(root / "features" / f"{image_id}.vd.hctf", fb.v_d)
        hctf.save(root / "features" / f"{image_id}.vg.hctf", fb.v_g)
    cdir = root / "classifiers"
    hctf.save(cdir / "e_inter.hctf", world.e_inter)
    hctf.save(cdir / "verb_text.hctf", world.verb_text)
    hctf.save(cdir / "clip_proj.hctf", world.clip_proj)
    world.regions.save(root / "regions")
    manifests = {}
    for split in ("train", "test"):
        man = world.manifest(split, root)
        man.save()
        manifests[split] = man
    return manifests


def load_fixture(root, name: str) -> np.ndarray:
    return hctf.load(Path(root) / "classifiers" / f"{name}.hctf")


def load_world_config(root) -> SyntheticConfig:
    path = Path(root) / "world.json"
    return SyntheticConfig.from_dict(read_json(path), path)
