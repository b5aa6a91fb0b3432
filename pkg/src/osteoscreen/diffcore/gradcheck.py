"""Finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, Tape


def numeric_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(point, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(Tensor(x.copy())).data)
        flat[i] = orig - step
        fm = float(fn(Tensor(x.copy())).data)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return out


def analytic_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    tape.backward(y)
    return np.zeros_like(x.data) if x.grad is None else x.grad


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``."""
    point = np.asarray(point, dtype=np.float64)
    a = analytic_grad(fn, point)
    n = numeric_grad(fn, point, step)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))
