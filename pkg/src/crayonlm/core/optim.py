"""AdamW with decoupled weight decay and the cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ArgumentError("total_steps must be positive")
        if not (self.lr_max >= self.lr_min >= 0):
            raise ArgumentError("need lr_max >= lr_min >= 0")


def cosine_lr(t: int, s: LrSchedule) -> float:
    """Learning rate at step ``t`` of a cosine anneal from ``lr_max`` to ``lr_min``."""
    if not 0 <= t <= s.total_steps:
        raise ArgumentError(f"step {t} outside [0, {s.total_steps}]")
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(math.pi * t / s.total_steps))


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    param_steps: dict[str, int] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
               no_decay: frozenset[str] | set[str] = frozenset()) -> list[str]:
    """Apply one AdamW update in place and return the names that moved.

    Only parameters that currently require grad and hold a gradient are
    touched; their moments and bias-correction counters advance. Everything
    else, including its optimizer state, is left exactly as it was.
    """
    b1, b2 = state.betas
    state.step += 1
    updated = []
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        if g.shape != p.shape:
            raise ArgumentError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        t = state.param_steps.get(name, 0) + 1
        state.param_steps[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        wd = 0.0 if name in no_decay else state.weight_decay
        data = p.data
        if wd:
            data = data * np.asarray(1.0 - lr * wd, dtype=data.dtype)
        p.data = (data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
        updated.append(name)
    return updated


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a fixed parameter dict."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay=frozenset()):
        self.params = params
        self.no_decay = frozenset(no_decay)
        self.state = OptimizerState(betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> list[str]:
        return adamw_step(self.params, self.state, lr, self.no_decay)
