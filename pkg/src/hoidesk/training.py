"""AdamW and the toy trainer."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifiers import ClassifierBank
from .data_io import DatasetManifest, FeatureBundle, load_features
from .inference import training_scores
from .matching import LossConfig, Predictions, compute_batch_losses
from .model import HOIModel, forward
from .taxonomy import Taxonomy
from .tensor import Tensor, backward, finite_diff_check


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        for g in grads:
            g *= max_norm / (total + 1e-12)
    return total


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-2  # toy scale; see the decisions ledger
    weight_decay: float = 1e-4
    batch_size: int | None = None  # None: the whole training set every step
    lr_drop: float = 2 / 3  # fraction of steps after which lr is divided by 10
    grad_clip: float = 0.1
    alpha: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    log_every: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    v_s: np.ndarray
    v_d: np.ndarray
    v_g: np.ndarray
    targets: list

    def take(self, idx) -> "Batch":
        return Batch(self.v_s[idx], self.v_d[idx], self.v_g[idx], [self.targets[i] for i in idx])

    def __len__(self) -> int:
        return len(self.targets)


def make_batch(bundles: list[FeatureBundle], targets: list) -> Batch:
    return Batch(np.stack([b.v_s for b in bundles]), np.stack([b.v_d for b in bundles]),
                 np.stack([b.v_g for b in bundles]), list(targets))


def load_batch(manifest: DatasetManifest) -> Batch:
    return make_batch([load_features(manifest, r) for r in manifest.records], [r.triplets for r in manifest.records])


def batch_predictions(model: HOIModel, batch: Batch, bank: ClassifierBank, tax: Taxonomy, alpha: float,
                      rng=None) -> list[Predictions]:
    out = forward(model, batch.v_s, batch.v_d, rng=rng)
    # instance and interaction stacks may differ in depth; pair their last layers
    n = min(len(out.instance), len(out.o_inter))
    offset = len(out.o_inter) - n
    return [Predictions(inst.b_h, inst.b_o, inst.cls_logits, training_scores(out, bank, tax, alpha, offset + i))
            for i, inst in enumerate(out.instance[-n:])]


def batch_loss(model: HOIModel, batch: Batch, bank: ClassifierBank, tax: Taxonomy, cfg: TrainConfig, rng=None,
               assigns=None):
    """Summed per-layer losses over the batch plus a per-term breakdown."""
    layers = batch_predictions(model, batch, bank, tax, cfg.alpha, rng)
    br, _ = compute_batch_losses(layers, batch.targets, model.cfg.num_objects, cfg.loss, assigns)
    return br.total, dict(br.weighted)


def model_gradcheck(model: HOIModel, batch: Batch, bank: ClassifierBank, tax: Taxonomy,
                    cfg: TrainConfig = TrainConfig(), max_coords: int | None = 8, seed: int = 0) -> float:
    """Finite-difference check of the full training loss w.r.t. every parameter tensor.

    The matching is computed once and held fixed; it is piecewise constant in
    the parameters, so perturbations must not re-solve it.
    """
    layers = batch_predictions(model, batch, bank, tax, cfg.alpha)
    _, assigns = compute_batch_losses(layers, batch.targets, model.cfg.num_objects, cfg.loss)

    def f(*_params):
        return batch_loss(model, batch, bank, tax, cfg, assigns=assigns)[0]

    return finite_diff_check(f, model.parameters(), max_coords=max_coords, seed=seed)


def train(model: HOIModel, batch: Batch, bank: ClassifierBank, tax: Taxonomy, cfg: TrainConfig = TrainConfig(),
          log=None) -> list[dict]:
    """Optimise ``model`` in place; returns (and optionally writes) one JSON-able row per logged step."""
    params = model.parameters()
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    drop_at = int(cfg.steps * cfg.lr_drop) if cfg.lr_drop else None
    history = []
    for step in range(cfg.steps):
        if drop_at is not None and step == drop_at:
            opt.lr = cfg.lr * 0.1
        sub = batch
        if cfg.batch_size is not None and cfg.batch_size < len(batch):
            sub = batch.take(np.sort(rng.choice(len(batch), cfg.batch_size, replace=False)))
        opt.zero_grad()
        loss, terms = batch_loss(model, sub, bank, tax, cfg, rng if model.cfg.dropout > 0 else None)
        backward(loss)
        gnorm = clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        row = {"step": step, "loss": float(loss.data), "grad_norm": gnorm, "lr": opt.lr, **terms}
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append(row)
            if log is not None:
                log.write(json.dumps(row, sort_keys=True) + "\n")
    return history


__all__ = ["AdamW", "Batch", "TrainConfig", "batch_loss", "batch_predictions", "clip_grad_norm", "load_batch",
           "make_batch", "model_gradcheck", "train"]
