"""Central finite-difference gradient checks for graph-built functions.

Run checks in float64: the engine preserves input dtype, so a float64 copy of
the parameters gives differences accurate to ~1e-10.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Graph, Tensor, backward

ABS_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = ABS_FLOOR) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, eps: float = 1e-6) -> float:
    """d f / d arr[index] by central difference; ``arr`` is perturbed in place and restored."""
    old = arr[index]
    arr[index] = old + eps
    up = f()
    arr[index] = old - eps
    down = f()
    arr[index] = old
    return (up - down) / (2 * eps)


def check_gradients(build: Callable[[Graph], Tensor], tensors: dict[str, Tensor], rng: np.random.Generator,
                    n_entries: int | None = None, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error per tensor between backward() and finite differences.

    ``build(g)`` must construct the scalar loss from ``tensors``. With
    ``n_entries`` only that many random entries per tensor are probed.
    """
    for t in tensors.values():
        t.zero_grad()
    g = Graph()
    backward(build(g), g)
    analytic = {n: t.grad.copy() for n, t in tensors.items()}

    def value() -> float:
        return float(build(Graph()).values)

    errors = {}
    for name, t in tensors.items():
        flat = t.values.reshape(-1)
        idx = np.arange(flat.size) if n_entries is None or n_entries >= flat.size \
            else rng.choice(flat.size, n_entries, replace=False)
        num = np.array([numeric_grad(value, flat, i, eps) for i in idx])
        errors[name] = rel_error(analytic[name].reshape(-1)[idx], num)
    return errors
