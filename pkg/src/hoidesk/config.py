"""Run configuration: one JSON document, overridable from the command line."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .classifiers import TRIPLET_SCORE_MODES, VERB_BUILDERS
from .data_io import SyntheticConfig
from .errors import BadConfig, ConfigError, FileError, FormatError
from .evaluation.splits import MODES
from .matching import LossConfig
from .taxonomy import read_json, write_json


@dataclass
class PathsConfig:
    data: str | None = None
    checkpoint: str | None = None
    bank: str | None = None
    predictions: str | None = None
    unseen_file: str | None = None


@dataclass
class ModelSection:
    """Interaction-side sizes; C_s, C_e and K_o come from the dataset."""

    dim: int = 16
    num_queries: int = 4
    num_layers: int = 2
    num_heads: int = 2
    ffn_hidden: int = 32
    instance_layers: int = 2
    instance_heads: int = 2
    instance_ffn: int = 32
    dropout: float = 0.0


@dataclass
class TrainSection:
    steps: int = 500
    lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int | None = None
    lr_drop: float = 2 / 3
    grad_clip: float = 0.1


@dataclass
class InferenceSection:
    alpha: float = 0.5
    topk: int = 10
    enhance: bool = True
    triplet_score_mode: str = "squared"
    nms_iou: float = 0.7
    keep_top: int = 100
    split: str = "test"
    workers: int = 1
    dump_attention: bool = False


@dataclass
class SplitSection:
    mode: str = "nf-uc"
    n_unseen: int | None = None
    restrict_seen: bool = False  # train-toy / build-verb-classifier only see seen categories
    fraction: float = 1.0
    val_fraction: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    verb_builder: str = "arithmetic"
    paths: PathsConfig = field(default_factory=PathsConfig)
    # D and C_e match the toy model so the projection fixture applies directly
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(dim=16, det_dim=16))
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceSection = field(default_factory=InferenceSection)
    split: SplitSection = field(default_factory=SplitSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict()
        return d

    def validate(self) -> "RunConfig":
        inf, tr, sp, m = self.inference, self.train, self.split, self.model
        checks = [
            (self.verb_builder in VERB_BUILDERS, f"verb_builder must be one of {VERB_BUILDERS}"),
            (inf.triplet_score_mode in TRIPLET_SCORE_MODES,
             f"inference.triplet_score_mode must be one of {TRIPLET_SCORE_MODES}"),
            (inf.topk >= 0, "inference.topk must be >= 0"),
            (0.0 <= inf.nms_iou <= 1.0, "inference.nms_iou must lie in [0, 1]"),
            (inf.keep_top >= 1, "inference.keep_top must be >= 1"),
            (inf.workers >= 1, "inference.workers must be >= 1"),
            (inf.split in ("train", "test"), "inference.split must be train or test"),
            (sp.mode in MODES, f"split.mode must be one of {MODES}"),
            (0.0 < sp.fraction <= 1.0, "split.fraction must lie in (0, 1]"),
            (0.0 <= sp.val_fraction <= 1.0, "split.val_fraction must lie in [0, 1]"),
            (sp.n_unseen is None or sp.n_unseen >= 0, "split.n_unseen must be >= 0"),
            (tr.steps >= 0, "train.steps must be >= 0"),
            (tr.lr > 0, "train.lr must be positive"),
            (tr.batch_size is None or tr.batch_size >= 1, "train.batch_size must be >= 1"),
            (0.0 <= tr.lr_drop <= 1.0, "train.lr_drop must lie in [0, 1]"),
            (tr.grad_clip > 0, "train.grad_clip must be positive"),
            (m.dim >= 1 and m.num_queries >= 1 and m.num_layers >= 1, "model sizes must be positive"),
            (m.dim % m.num_heads == 0, "model.dim must be divisible by model.num_heads"),
            (m.dim % m.instance_heads == 0, "model.dim must be divisible by model.instance_heads"),
            (0.0 <= m.dropout < 1.0, "model.dropout must lie in [0, 1)"),
            (self.loss.no_object_weight >= 0 and self.loss.focal_gamma >= 0, "loss weights must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _coerce(value, default, where: str):
    """Type-check a JSON scalar against the field default (None defaults accept anything numeric)."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _section(cls, d, where: str, base=None):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    base = cls() if base is None else base
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown field {where}.{unknown[0]}")
    kw = {}
    for name, value in d.items():
        default = getattr(base, name)
        if dataclasses.is_dataclass(default):
            kw[name] = _section(type(default), value, f"{where}.{name}", default)
        elif isinstance(default, tuple):
            kw[name] = tuple(value)
        else:
            kw[name] = _coerce(value, default, f"{where}.{name}")
    try:
        return cls(**{**{f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}, **kw})
    except BadConfig as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(d: dict) -> RunConfig:
    return _section(RunConfig, d, "config").validate()


def load_config(path) -> RunConfig:
    try:
        return config_from_dict(read_json(path))
    except (FileError, FormatError) as exc:
        raise ConfigError(str(exc)) from None


def override(cfg: RunConfig, dotted: str, value) -> None:
    """Set ``a.b.c = value`` with the same type checks as file loading."""
    *parents, leaf = dotted.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    default = getattr(obj, leaf)
    setattr(obj, leaf, _coerce(value, default, dotted))


def save_config(cfg: RunConfig, path) -> None:
    write_json(Path(path), cfg.to_dict())


__all__ = [
    "InferenceSection", "ModelSection", "PathsConfig", "RunConfig", "SplitSection", "TrainSection",
    "config_from_dict", "load_config", "override", "save_config",
]
