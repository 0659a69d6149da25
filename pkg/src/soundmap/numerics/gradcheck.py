"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, backward


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3,
                 coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (optionally only at flat ``coords``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-3,
               coords: np.ndarray | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a Tensor to a scalar Tensor; it is evaluated in float64.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    backward(f(xt))
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    analytic = np.asarray(analytic).reshape(-1)

    def scalar(v: np.ndarray) -> float:
        return float(f(Tensor(v)).data)

    numeric = numeric_grad(scalar, x, eps, coords)
    if coords is not None:
        analytic = analytic[np.asarray(coords)]
    return max_rel_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-3,
                      coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> dict[str, float]:
    """Check d(loss)/d(param) for every named float64 parameter.

    With ``coords_per_param`` set, a random subset of coordinates is checked
    per tensor.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    grads = backward(loss_fn(), params)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if coords_per_param is None or coords_per_param >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_param, replace=False)
        numeric = np.zeros(len(coords))
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
        errors[name] = max_rel_error(np.asarray(grads[name]).reshape(-1)[coords], numeric)
    return errors
