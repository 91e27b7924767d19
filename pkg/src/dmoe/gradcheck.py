"""Central finite-difference gradient checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Gradients of scalar ``fn(*tensors)`` by central differences, one input entry at a time."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    out = []
    for k, x in enumerate(base):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = fn(*[Tensor(b) for b in base]).item()
            x[idx] = orig - h
            fm = fn(*[Tensor(b) for b in base]).item()
            x[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def autodiff_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    fn(*ts).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), with a floor so all-zero gradients compare as equal."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return num / den


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between autodiff and finite differences across all inputs."""
    ad = autodiff_grads(fn, inputs)
    fd = numerical_grads(fn, inputs, h)
    return max(relative_error(a, f) for a, f in zip(ad, fd))
