"""Multi-head attention and the knowledge-integration decoder layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .nn import LayerNorm, Linear, Module, dropout
from .tensor import Tensor, add, matmul, relu, reshape, softmax, transpose


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 8
    ffn_hidden: int = 2048
    num_layers: int = 3
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0 or self.ffn_hidden <= 0 or self.num_layers <= 0:
            raise ValueError("attention dims must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def sine_position_encoding_2d(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """DETR-style sinusoidal encoding for an h x w grid, flattened row-major to (h*w, dim).

    Half the channels encode y, half encode x; odd ``dim`` leaves one zero channel.
    """
    half = dim // 2
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w * 2 * np.pi
    idx = np.arange(half)
    freqs = temperature ** (2 * (idx // 2) / max(half, 1))

    def enc(vals):
        a = vals[:, None] / freqs[None, :]
        out = np.empty_like(a)
        out[:, 0::2] = np.sin(a[:, 0::2])
        out[:, 1::2] = np.cos(a[:, 1::2])
        return out

    ey, ex = enc(ys), enc(xs)
    pos = np.zeros((h, w, dim))
    pos[:, :, :half] = ey[:, None, :]
    pos[:, :, half:2 * half] = ex[None, :, :]
    return pos.reshape(h * w, dim)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.dropout_rate = dropout_rate

    def _split(self, x: Tensor) -> Tensor:
        lead, n = x.shape[:-2], x.shape[-2]
        dh = self.dim // self.num_heads
        x = reshape(x, lead + (n, self.num_heads, dh))
        nd = len(lead)
        return transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, rng=None) -> tuple[Tensor, np.ndarray]:
        """Returns the attended output (..., N, D) and weights (..., heads, N, M)."""
        for name, t in (("q", q), ("k", k), ("v", v)):
            if t.shape[-1] != self.dim:
                raise ShapeMismatch(f"{name} last dim {t.shape[-1]} != model dim {self.dim}")
        if k.shape != v.shape or k.shape[:-2] != q.shape[:-2]:
            raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
        dh = self.dim // self.num_heads
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        nd = qh.ndim
        scores = matmul(qh, transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))) * (1.0 / np.sqrt(dh))
        weights = softmax(scores, axis=-1)
        attended = matmul(dropout(weights, self.dropout_rate, rng), vh)
        lead = q.shape[:-2]
        nl = len(lead)
        merged = transpose(attended, tuple(range(nl)) + (nl + 1, nl, nl + 2))
        merged = reshape(merged, lead + (q.shape[-2], self.dim))
        return self.out_proj(merged), weights.data


def _with_pos(x: Tensor, pos: Tensor | None) -> Tensor:
    return x if pos is None else add(x, pos)


@dataclass
class LayerTrace:
    """Attention weights captured during one decoder-layer forward."""

    self_attn: np.ndarray
    cross_attn: list = field(default_factory=list)
    cross_sum: Tensor | None = None


class DecoderLayer(Module):
    """Post-norm decoder layer whose single cross-attention block is shared over every memory.

    With two memories (CLIP spatial map and projected detection map) this is the
    knowledge-integration layer: the branch outputs are summed before the FFN.
    With one memory it is a plain transformer decoder layer.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(d, cfg.num_heads, rng, cfg.dropout_rate)
        self.cross_attn = MultiHeadAttention(d, cfg.num_heads, rng, cfg.dropout_rate)
        self.ffn_in = Linear(d, cfg.ffn_hidden, rng)
        self.ffn_out = Linear(cfg.ffn_hidden, d, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, q: Tensor, memories: list[Tensor], key_pos: list | None = None,
                 query_pos: Tensor | None = None, rng=None) -> tuple[Tensor, LayerTrace]:
        if key_pos is None:
            key_pos = [None] * len(memories)
        qk = _with_pos(q, query_pos)
        sa, sa_w = self.self_attn(qk, qk, q, rng)
        q = self.norm1(add(q, dropout(sa, self.dropout_rate, rng)))
        qk = _with_pos(q, query_pos)
        trace = LayerTrace(self_attn=sa_w)
        branch_sum = None
        for mem, pos in zip(memories, key_pos):
            out, w = self.cross_attn(qk, _with_pos(mem, pos), mem, rng)
            trace.cross_attn.append(w)
            branch_sum = out if branch_sum is None else add(branch_sum, out)
        trace.cross_sum = branch_sum
        q = self.norm2(add(q, dropout(branch_sum, self.dropout_rate, rng)))
        ff = self.ffn_out(relu(self.ffn_in(q)))
        q = self.norm3(add(q, dropout(ff, self.dropout_rate, rng)))
        return q, trace


class KnowledgeIntegrationLayer(DecoderLayer):
    """Self-attention, shared cross-attention over the CLIP and detection maps, summed, then FFN."""

    def forward(self, q_inter: Tensor, v_s: Tensor, v_d_proj: Tensor, key_pos=None, rng=None):
        if v_s.shape != v_d_proj.shape:
            raise ShapeMismatch(f"V_s {v_s.shape} and projected V_d {v_d_proj.shape} differ")
        if q_inter.shape[-1] != v_s.shape[-1]:
            raise ShapeMismatch(f"query dim {q_inter.shape[-1]} != memory dim {v_s.shape[-1]}")
        pos = [key_pos, key_pos]
        return self(q_inter, [v_s, v_d_proj], pos, rng=rng)


def knowledge_integration_forward(layer: KnowledgeIntegrationLayer, q_inter: Tensor, v_s: Tensor,
                                  v_d_proj: Tensor, key_pos=None) -> Tensor:
    out, _ = layer.forward(q_inter, v_s, v_d_proj, key_pos)
    return out


def decoder_stack_forward(layers: list[KnowledgeIntegrationLayer], q_inter: Tensor, v_s: Tensor,
                          v_d_proj: Tensor, key_pos=None, rng=None, traces: list | None = None) -> list[Tensor]:
    """Run every layer in order and return each layer's output (last entry is final)."""
    if not layers:
        raise ValueError("decoder stack needs at least one layer")
    outs = []
    q = q_inter
    for layer in layers:
        q, tr = layer.forward(q, v_s, v_d_proj, key_pos, rng=rng)
        outs.append(q)
        if traces is not None:
            traces.append(tr)
    return outs
