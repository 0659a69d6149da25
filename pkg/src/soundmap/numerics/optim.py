"""Adam with decoupled weight decay and the cosine warm-up schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _adam_update_np(p, g, m, v, lr, wd, b1, b2, bc1, bc2, eps):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    if wd:
        p -= p.dtype.type(lr * wd) * p
    p -= p.dtype.type(lr) * (m / bc1) / (np.sqrt(v / bc2) + p.dtype.type(eps))


if numba is not None:
    @numba.njit(cache=True)
    def _adam_update_kernel(p, g, m, v, lr, wd, b1, b2, bc1, bc2, eps):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1 - b1) * gi
            vi = b2 * v[i] + (1 - b2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            pi = p[i] - lr * wd * p[i]
            p[i] = pi - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)

    def _adam_update(p, g, m, v, lr, wd, b1, b2, bc1, bc2, eps):
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            return _adam_update_np(p, g, m, v, lr, wd, b1, b2, bc1, bc2, eps)
        t = p.dtype.type
        _adam_update_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                            m.reshape(-1), v.reshape(-1), t(lr), t(wd), t(b1), t(b2), t(bc1), t(bc2), t(eps))
else:  # pragma: no cover
    _adam_update = _adam_update_np


@dataclass
class AdamState:
    lr_base: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.2
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr_base, self.beta1, self.beta2, self.eps, self.weight_decay,
                         self.step, {k: x.copy() for k, x in self.m.items()},
                         {k: x.copy() for k, x in self.v.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, no_decay: frozenset[str] = frozenset()) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` precedes the Adam update.
    Names in ``no_decay`` skip the decay term.
    """
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"grad for {name!r} has shape {g.shape}, param {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        wd = 0.0 if name in no_decay else state.weight_decay
        _adam_update(p, g.astype(p.dtype, copy=False), m, state.v[name], lr, wd, b1, b2, bc1, bc2,
                     state.eps)
    state.step = t


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    base_lr: float

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ContractError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")


def cosine_warmup_lr(step: int, schedule: LrSchedule) -> float:
    """Linear ramp to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w, total = schedule.warmup_steps, schedule.total_steps
    if step <= w:
        return schedule.base_lr * step / w
    frac = (step - w) / (total - w)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
