"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Container, Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamWHyper,
    no_decay: Container[str] = (),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected AdamW update, applied to ``params`` in place.

    Weight decay is decoupled (``p -= lr * wd * p``) and skipped for names in
    ``no_decay``. Gradients are checked for finiteness before anything moves.
    """
    if state.step < 0:
        raise ValueError("optimizer step count must be >= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if hyper.weight_decay and name not in no_decay:
            p -= hyper.lr * hyper.weight_decay * p
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    state.step = t
    return params, state


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup to ``peak_lr`` over the first ``warmup_frac`` of training, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step < warm:
        return peak_lr * step / warm
    return peak_lr * (total_steps - step) / (total_steps - warm)
