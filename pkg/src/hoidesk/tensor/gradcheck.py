"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, mul, no_grad, sum_


def _scalarize(out: Tensor, probe: np.ndarray | None) -> Tensor:
    if out.size == 1 and probe is None:
        return out
    return sum_(mul(out, Tensor(probe, dtype=out.dtype)))


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` is called with the tensors in ``x``. Non-scalar outputs are reduced
    with a fixed random probe vector. ``max_coords`` samples that many
    coordinates per input tensor instead of checking every entry.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    rng = np.random.default_rng(seed)
    out = f(*inputs)
    probe = None if out.size == 1 else rng.standard_normal(out.shape)
    loss = _scalarize(out, probe)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        with no_grad():
            return float(_scalarize(f(*inputs), probe).data)

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
