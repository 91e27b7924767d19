"""AdamW with decoupled weight decay over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-5
    lr_scale: float = 50.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    @property
    def effective_lr(self) -> float:
        return self.learning_rate * self.lr_scale


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state

    @classmethod
    def from_config(cls, params: Mapping[str, Tensor], cfg: OptimizerConfig, lr: float | None = None):
        return cls.for_params(
            params,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            learning_rate=cfg.effective_lr if lr is None else lr,
            weight_decay=cfg.weight_decay,
            epsilon=cfg.epsilon,
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One AdamW update in place. ``masks`` restricts updates (and moment updates) to True entries."""
    if set(params) != set(state.first_moment):
        raise ValueError("parameter set does not match optimizer state")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        if g.shape != p.data.shape or state.first_moment[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {p.data.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate if lr is None else lr
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        mask = None if masks is None else masks.get(name)
        if mask is None:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
            if state.weight_decay:
                p.data -= lr * state.weight_decay * p.data
            p.data -= lr * update
        else:
            m[mask] = b1 * m[mask] + (1.0 - b1) * g[mask]
            v[mask] = b2 * v[mask] + (1.0 - b2) * g[mask] * g[mask]
            update = (m[mask] / bc1) / (np.sqrt(v[mask] / bc2) + state.epsilon)
            if state.weight_decay:
                p.data[mask] -= lr * state.weight_decay * p.data[mask]
            p.data[mask] -= lr * update


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total
