"""End-to-end forward pass: instance heads, interaction queries, knowledge integration, verb adapter."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    AttentionConfig,
    DecoderLayer,
    KnowledgeIntegrationLayer,
    decoder_stack_forward,
    sine_position_encoding_2d,
)
from .errors import FileError, FormatError, ShapeMismatch
from .nn import MLP, Linear, Module, param
from .taxonomy import check_fields, read_json, write_json
from .tensor import (
    Tensor,
    concat,
    expand_leading,
    getitem,
    hctf,
    l2_normalize,
    mul,
    reshape,
    sigmoid,
    softmax,
)


@dataclass(frozen=True)
class ModelConfig:
    num_objects: int
    dim: int = 512
    clip_dim: int = 512
    det_dim: int = 256
    num_queries: int = 64
    num_layers: int = 3
    num_heads: int = 8
    ffn_hidden: int = 2048
    instance_layers: int = 3
    instance_heads: int = 8
    instance_ffn: int = 1024
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_objects", "dim", "clip_dim", "det_dim", "num_queries", "num_layers", "instance_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # constructing the attention configs validates head divisibility
        self.interaction_attention()
        self.instance_attention()

    def interaction_attention(self) -> AttentionConfig:
        return AttentionConfig(self.clip_dim, self.num_heads, self.ffn_hidden, self.num_layers, self.dropout)

    def instance_attention(self) -> AttentionConfig:
        return AttentionConfig(self.det_dim, self.instance_heads, self.instance_ffn, self.instance_layers, self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "ModelConfig":
        check_fields(d, {"num_objects"}, set(cls.__dataclass_fields__) - {"num_objects"}, path, "config")
        return cls(**d)


def toy_config(num_objects: int, **kw) -> ModelConfig:
    base = dict(dim=16, clip_dim=16, det_dim=8, num_queries=4, num_layers=2, num_heads=2, ffn_hidden=32,
                instance_layers=2, instance_heads=2, instance_ffn=16)
    base.update(kw)
    return ModelConfig(num_objects=num_objects, **base)


class HOIModel(Module):
    def __init__(self, cfg: ModelConfig, clip_proj: np.ndarray | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        C_e, C_s, D = cfg.det_dim, cfg.clip_dim, cfg.dim
        self.query_h = param(rng.standard_normal((cfg.num_queries, C_e)))
        self.query_o = param(rng.standard_normal((cfg.num_queries, C_e)))
        self.instance_layers = [DecoderLayer(cfg.instance_attention(), rng) for _ in range(cfg.instance_layers)]
        self.human_box = MLP([C_e, C_e, 4], rng)
        self.object_box = MLP([C_e, C_e, 4], rng)
        self.object_cls = Linear(C_e, cfg.num_objects + 1, rng)
        self.w_i = Linear(C_e, C_s, rng)
        self.w_p = Linear(C_e, C_s, rng)
        self.interaction_layers = [KnowledgeIntegrationLayer(cfg.interaction_attention(), rng)
                                   for _ in range(cfg.num_layers)]
        self.proj = Linear(C_s, D, rng, bias=False)
        if clip_proj is not None:
            clip_proj = np.asarray(clip_proj, dtype=np.float64)
            if clip_proj.shape != (C_s, D):
                raise ShapeMismatch(f"projection fixture {clip_proj.shape} != {(C_s, D)}")
            self.proj.weight.data = clip_proj.astype(self.proj.weight.dtype)
        self.verb_adapter = MLP([C_s, D, D, D], rng)


@dataclass
class InstanceOutputs:
    o_h: Tensor
    o_o: Tensor
    b_h: Tensor
    b_o: Tensor
    cls_logits: Tensor

    @property
    def c_o(self) -> np.ndarray:
        return softmax(self.cls_logits, axis=-1).data


@dataclass
class ForwardOutputs:
    """Every tensor carries a leading batch dim. Lists run over decoder layers, last entry final."""

    instance: list
    q_inter: list
    o_inter: list
    o_verb: list
    traces: list = field(default_factory=list)

    @property
    def final(self) -> InstanceOutputs:
        return self.instance[-1]

    @property
    def b_h(self) -> Tensor:
        return self.final.b_h

    @property
    def b_o(self) -> Tensor:
        return self.final.b_o

    @property
    def c_o(self) -> np.ndarray:
        return self.final.c_o


# ---------------------------------------------------------------------------


def bilinear_resample(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resample an (H, W, C) or (B, H, W, C) grid to ``size`` with half-pixel centres."""
    x = np.asarray(x)
    h_out, w_out = size
    h_in, w_in = x.shape[-3], x.shape[-2]
    if (h_in, w_in) == (h_out, w_out):
        return x

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, wy = coords(h_out, h_in)
    x0, x1, wx = coords(w_out, w_in)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = x[..., y0, :, :][..., :, x0, :] * (1 - wx) + x[..., y0, :, :][..., :, x1, :] * wx
    bot = x[..., y1, :, :][..., :, x0, :] * (1 - wx) + x[..., y1, :, :][..., :, x1, :] * wx
    return top * (1 - wy) + bot * wy


def _flatten_grid(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 4:
        b, h, w, c = t.shape
        return reshape(t, (b, h * w, c))
    return t


def _heads(model: HOIModel, o_h: Tensor, o_o: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return sigmoid(model.human_box(o_h)), sigmoid(model.object_box(o_o)), model.object_cls(o_o)


def instance_decode(v_d, model: HOIModel, rng=None) -> list[InstanceOutputs]:
    """Human and object queries decoded against the detection map.

    ``v_d`` is (B, H, W, C_e) or already flattened (B, T, C_e). Returns one
    InstanceOutputs per decoder layer.
    """
    cfg = model.cfg
    raw = v_d.data if isinstance(v_d, Tensor) else np.asarray(v_d)
    if raw.shape[-1] != cfg.det_dim:
        raise ShapeMismatch(f"V_d channels {raw.shape[-1]} != C_e {cfg.det_dim}")
    pos = None
    if raw.ndim == 4:
        pos = Tensor(sine_position_encoding_2d(raw.shape[1], raw.shape[2], cfg.det_dim), dtype=model.query_h.dtype)
    mem = _flatten_grid(v_d)
    B = mem.shape[0]
    q = expand_leading(concat([model.query_h, model.query_o], axis=0), (B,))
    n = cfg.num_queries
    outs = []
    for layer in model.instance_layers:
        q, _ = layer(q, [mem], [pos], rng=rng)
        o_h = getitem(q, (slice(None), slice(0, n)))
        o_o = getitem(q, (slice(None), slice(n, 2 * n)))
        b_h, b_o, logits = _heads(model, o_h, o_o)
        outs.append(InstanceOutputs(o_h, o_o, b_h, b_o, logits))
    return outs


def make_interaction_queries(o_h: Tensor, o_o: Tensor, model: HOIModel) -> Tensor:
    """Average of the paired human and object features, then the W_i projection."""
    if o_h.shape != o_o.shape:
        raise ShapeMismatch(f"O_h {o_h.shape} vs O_o {o_o.shape}")
    return model.w_i(mul(o_h + o_o, 0.5))


def project_detection_features(v_d, model: HOIModel, grid: tuple[int, int] | None = None) -> Tensor:
    """V_d W_p + b_p on the flattened detection map, resampled to ``grid`` first when given."""
    raw = v_d.data if isinstance(v_d, Tensor) else np.asarray(v_d)
    if raw.shape[-1] != model.cfg.det_dim:
        raise ShapeMismatch(f"V_d channels {raw.shape[-1]} != C_e {model.cfg.det_dim}")
    if grid is not None and raw.ndim >= 3 and raw.shape[-3:-1] != tuple(grid):
        v_d = bilinear_resample(raw, grid)
    return model.w_p(_flatten_grid(v_d))


def _to_clip_space(model: HOIModel, q: Tensor) -> tuple[Tensor, Tensor]:
    return l2_normalize(model.proj(q)), verb_adapter_forward(q, model)


def interaction_decode(q_inter: Tensor, v_s, v_d_proj: Tensor, model: HOIModel, key_pos=None, rng=None,
                       traces: list | None = None) -> tuple[list, list, list]:
    """Run the knowledge-integration stack. Returns per-layer Q_inter, O_inter and O_verb."""
    v_s = _flatten_grid(v_s)
    if v_s.shape != v_d_proj.shape:
        raise ShapeMismatch(f"V_s {v_s.shape} vs projected V_d {v_d_proj.shape}")
    qs = decoder_stack_forward(model.interaction_layers, q_inter, v_s, v_d_proj, key_pos, rng, traces)
    o_inter, o_verb = [], []
    for q in qs:
        oi, ov = _to_clip_space(model, q)
        o_inter.append(oi)
        o_verb.append(ov)
    return qs, o_inter, o_verb


def verb_adapter_forward(q_final: Tensor, model: HOIModel) -> Tensor:
    if q_final.shape[-1] != model.cfg.clip_dim:
        raise ShapeMismatch(f"adapter input dim {q_final.shape[-1]} != C_s {model.cfg.clip_dim}")
    return l2_normalize(model.verb_adapter(q_final))


def forward(model: HOIModel, v_s, v_d, rng=None, keep_traces: bool = False) -> ForwardOutputs:
    """Full pass for a batch: v_s (B, H_s, W_s, C_s), v_d (B, H_d, W_d, C_e)."""
    v_s = np.asarray(v_s.data if isinstance(v_s, Tensor) else v_s)
    v_d = np.asarray(v_d.data if isinstance(v_d, Tensor) else v_d)
    if v_s.ndim == 3:
        v_s, v_d = v_s[None], v_d[None]
    if v_s.ndim != 4 or v_d.ndim != 4 or v_s.shape[0] != v_d.shape[0]:
        raise ShapeMismatch(f"expected batched grids, got V_s {v_s.shape}, V_d {v_d.shape}")
    if v_s.shape[-1] != model.cfg.clip_dim:
        raise ShapeMismatch(f"V_s channels {v_s.shape[-1]} != C_s {model.cfg.clip_dim}")
    dtype = model.query_h.dtype
    instance = instance_decode(Tensor(v_d, dtype=dtype), model, rng)
    fin = instance[-1]
    q_inter = make_interaction_queries(fin.o_h, fin.o_o, model)
    H, W = v_s.shape[1], v_s.shape[2]
    v_d_proj = project_detection_features(Tensor(bilinear_resample(v_d, (H, W)), dtype=dtype), model)
    pos = Tensor(sine_position_encoding_2d(H, W, model.cfg.clip_dim), dtype=dtype)
    traces = [] if keep_traces else None
    qs, o_inter, o_verb = interaction_decode(q_inter, Tensor(v_s, dtype=dtype), v_d_proj, model, pos, rng, traces)
    return ForwardOutputs(instance, qs, o_inter, o_verb, traces or [])


# ---------------------------------------------------------------------------
# checkpoints: a directory of HCTF tensors plus manifest.json

CHECKPOINT_VERSION = 1


def save_params(model: HOIModel, path) -> None:
    path = Path(path)
    entries = []
    for name, p in model.named_parameters():
        fname = f"tensors/{name}.hctf"
        hctf.save(path / fname, p.data)
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    write_json(path / "manifest.json", {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(),
                                        "tensors": entries})


def load_params(path) -> HOIModel:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileError(f"no checkpoint manifest at {mpath}")
    meta = read_json(mpath)
    check_fields(meta, {"version", "config", "tensors"}, set(), mpath)
    if meta["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta['version']}", path=mpath, field="version")
    cfg = ModelConfig.from_dict(meta["config"], mpath)
    model = HOIModel(cfg)
    state = {}
    for i, e in enumerate(meta["tensors"]):
        check_fields(e, {"name", "shape", "file"}, set(), mpath, f"tensors[{i}]")
        arr = hctf.load(path / e["file"])
        if list(arr.shape) != list(e["shape"]):
            raise FormatError(f"{e['name']} shape {arr.shape} != manifest {e['shape']}", path=path / e["file"],
                              field=f"tensors[{i}].shape")
        state[e["name"]] = arr
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(str(exc), path=mpath, field="tensors") from None
    return model


def count_parameters(model: HOIModel) -> int:
    return int(sum(p.size for p in model.parameters()))


def init_like(model: HOIModel, seed: int) -> HOIModel:
    """Fresh model with the same config but another seed."""
    return HOIModel(ModelConfig(**{**model.cfg.to_dict(), "seed": seed}))
