"""Central finite differences, used to audit autograd in double precision."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def numeric_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-4,
                 index: Sequence[int] | None = None) -> np.ndarray:
    """d fn() / d tensor at flat positions ``index`` (all positions if None).

    ``fn`` must be a closure that recomputes the scalar from scratch; the
    tensor is perturbed in place and restored.
    """
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[k] = (up - down) / (2 * h)
    return out


def relative_error(a, b, floor: float = 1e-10) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                    h: float = 1e-4, max_entries: int | None = None, seed: int = 0,
                    floor: float = 1e-10) -> dict[str, float]:
    """Relative error between autograd and finite differences for each named tensor.

    With ``max_entries`` set, a seeded random subset of entries per tensor is
    compared (the whole tensor otherwise). ``floor`` bounds the denominator so
    tensors whose true gradient is exactly zero (e.g. a bias feeding straight
    into a per-channel norm) report the absolute difference instead.
    """
    for t in tensors.values():
        t.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        n = t.numel()
        if max_entries is not None and n > max_entries:
            idx = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        else:
            idx = list(range(n))
        auto = (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1)[idx]
        num = numeric_grad(fn, t, h, idx)
        errors[name] = relative_error(auto.detach().numpy(), num, floor)
    return errors
