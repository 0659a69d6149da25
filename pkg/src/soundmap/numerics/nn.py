"""Small layer library on top of the autograd tensors."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

_NEG = -1e9


def param(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Parameters and submodules are discovered from instance attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def _set_param(self, dotted: str, value: Tensor) -> None:
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        setattr(obj, parts[-1], value)

    def load_arrays(self, arrays: dict[str, np.ndarray], dtype=None) -> None:
        """Replace parameter values (copies); ``dtype`` optionally casts."""
        current = self.named_parameters()
        missing = set(current) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, old in current.items():
            arr = np.array(arrays[name], dtype=dtype or old.dtype)
            if arr.shape != old.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {old.shape}")
            self._set_param(name, param(arr, arr.dtype))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def astype(self, dtype) -> "Module":
        self.load_arrays(self.state_arrays(), dtype=dtype)
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None, bias: bool = True,
                 scale: float = 1.0):
        if rng is None or scale == 0.0:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gamma = param(np.ones(n))
        self.beta = param(np.zeros(n))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layernorm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator | None, scale: float = 0.02):
        table = np.zeros((n, dim)) if rng is None else rng.normal(0.0, scale, size=(n, dim))
        self.table = param(table)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ag.take_rows(self.table, ids)


class MLP(Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.gelu(x)
        return x


def key_mask_bias(key_mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """(B, T) presence mask -> additive (B, 1, 1, T) attention bias."""
    if key_mask is None:
        return None
    return np.where(key_mask, 0.0, _NEG).astype(dtype)[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        b, t, w = x.shape
        h = self.heads
        dh = w // h
        qkv = self.qkv(x).reshape(b, t, 3, h, dh)
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.transpose(attn @ v, (0, 2, 1, 3)).reshape(b, t, w)
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm block: attention then a GELU feed-forward, both residual."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.ff = MLP([width, ff_mult * width, width], rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.ff(self.ln2(x))


class Transformer(Module):
    def __init__(self, width: int, heads: int, depth: int, rng: np.random.Generator, ff_mult: int = 2):
        self.blocks = [TransformerBlock(width, heads, rng, ff_mult) for _ in range(depth)]
        self.ln_f = LayerNorm(width)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        bias = key_mask_bias(key_mask, x.dtype)
        for block in self.blocks:
            x = block(x, bias)
        return self.ln_f(x)
