"""Central finite-difference gradient checking (64-bit)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, no_grad


def _eval(f, inputs) -> float:
    with no_grad():
        return float(f(*inputs).data.reshape(-1)[0])


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
               coords_per_tensor: int | None = None, seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps the tensors in ``x`` to a scalar.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  ``coords_per_tensor`` limits
    the check to a seeded random subset of coordinates in each input.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    get_tape().reset()
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if coords_per_tensor is not None and coords_per_tensor < flat.size:
            coords = np.sort(rng.choice(flat.size, coords_per_tensor, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = _eval(f, inputs)
            flat[i] = orig - eps
            down = _eval(f, inputs)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
