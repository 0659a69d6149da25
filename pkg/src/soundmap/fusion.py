"""Transformer fusion of image features with metadata tokens.

The sequence is ``[special, h_i, latlon, month, hour, audio_source, text_source]``
with absent components removed from attention entirely. There are no
positional encodings; each component is identified by its own embedder, so
the output does not depend on token order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import GaussianEmbedding, ProbHead
from .errors import InputDomainError
from .geodata import AUDIO_SOURCES, TEXT_SOURCES, GeoSample
from .numerics import autograd as ag
from .numerics.autograd import Tensor
from .numerics.nn import Embedding, Linear, Module, Transformer, param

COMPONENTS = ("latlon", "month", "hour", "audio_source", "text_source")


@dataclass(frozen=True)
class Metadata:
    latlon: tuple[float, float] = (0.0, 0.0)
    month: int = 1
    hour: int = 0
    audio_source: int = 0
    text_source: int = 0
    present_mask: tuple[bool, ...] = field(default=(True,) * 5)

    def __post_init__(self):
        lat, lon = self.latlon
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise InputDomainError(f"latlon {self.latlon} out of range")
        if not 1 <= self.month <= 12:
            raise InputDomainError(f"month {self.month} outside 1..12")
        if not 0 <= self.hour <= 23:
            raise InputDomainError(f"hour {self.hour} outside 0..23")
        if not 0 <= self.audio_source < len(AUDIO_SOURCES):
            raise InputDomainError(f"audio_source index {self.audio_source} out of range")
        if not 0 <= self.text_source < len(TEXT_SOURCES):
            raise InputDomainError(f"text_source index {self.text_source} out of range")
        if len(self.present_mask) != len(COMPONENTS):
            raise InputDomainError("present_mask needs 5 entries")

    @classmethod
    def from_sample(cls, s: GeoSample, present_mask=(True,) * 5) -> "Metadata":
        return cls((s.lat, s.lon), s.month, s.hour, AUDIO_SOURCES.index(s.audio_source),
                   TEXT_SOURCES.index(s.text_source), tuple(bool(m) for m in present_mask))

    def masked(self, present_mask) -> "Metadata":
        return Metadata(self.latlon, self.month, self.hour, self.audio_source, self.text_source,
                        tuple(bool(m) for m in present_mask))

    def to_json(self) -> dict:
        return {"latlon": list(self.latlon), "month": self.month, "hour": self.hour,
                "audio_source": self.audio_source, "text_source": self.text_source,
                "present_mask": list(self.present_mask)}


@dataclass
class MetadataBatch:
    latlon: np.ndarray  # (B, 2) degrees
    month: np.ndarray
    hour: np.ndarray
    audio_source: np.ndarray
    text_source: np.ndarray
    present: np.ndarray  # (B, 5) bool

    def __len__(self) -> int:
        return len(self.month)

    @classmethod
    def stack(cls, metas: list[Metadata]) -> "MetadataBatch":
        return cls(np.array([m.latlon for m in metas], dtype=float).reshape(-1, 2),
                   np.array([m.month for m in metas]), np.array([m.hour for m in metas]),
                   np.array([m.audio_source for m in metas]), np.array([m.text_source for m in metas]),
                   np.array([m.present_mask for m in metas], dtype=bool).reshape(-1, 5))

    def with_present(self, present: np.ndarray) -> "MetadataBatch":
        return MetadataBatch(self.latlon, self.month, self.hour, self.audio_source,
                             self.text_source, np.asarray(present, dtype=bool))


def cyclic(value, period: float) -> np.ndarray:
    angle = 2 * np.pi * np.asarray(value, dtype=float) / period
    return np.stack([np.sin(angle), np.cos(angle)], axis=-1)


def latlon_features(latlon: np.ndarray) -> np.ndarray:
    rad = np.radians(np.asarray(latlon, dtype=float))
    return np.concatenate([np.sin(rad[..., :1]), np.cos(rad[..., :1]),
                           np.sin(rad[..., 1:]), np.cos(rad[..., 1:])], axis=-1)


def metadata_dropout(meta: Metadata, rate: float, rng: np.random.Generator) -> Metadata:
    """Independently drop each present component with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise InputDomainError(f"dropout rate {rate} outside [0, 1]")
    keep = rng.random(len(COMPONENTS)) >= rate
    return meta.masked(tuple(bool(p and k) for p, k in zip(meta.present_mask, keep)))


def dropout_mask(present: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Batched form of :func:`metadata_dropout`: one Bernoulli per component per sample."""
    if not 0.0 <= rate <= 1.0:
        raise InputDomainError(f"dropout rate {rate} outside [0, 1]")
    return present & (rng.random(present.shape) >= rate)


class MetadataFusion(Module):
    def __init__(self, d: int, depth: int, heads: int, rng: np.random.Generator, ff_mult: int = 2,
                 log_var_bias: float = 0.0, mu_scale: float = 1.0):
        # component embedders start at zero so never-seen metadata stays inert
        self.latlon = Linear(4, d, None)
        self.month = Linear(2, d, None)
        self.hour = Linear(2, d, None)
        self.audio_source = Embedding(len(AUDIO_SOURCES), d, None)
        self.text_source = Embedding(len(TEXT_SOURCES), d, None)
        self.special = param(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.body = Transformer(d, heads, depth, rng, ff_mult)
        self.head = ProbHead(d, d, rng, mu_scale=mu_scale, log_var_bias=log_var_bias)

    def embed_metadata(self, meta: MetadataBatch, dtype=None) -> tuple[Tensor, np.ndarray]:
        """(B, 5, d) component tokens, zeroed where absent, and the (B, 5) presence mask."""
        dtype = dtype or self.special.dtype
        cast = lambda a: a.astype(dtype)  # noqa: E731
        toks = [
            self.latlon(Tensor(cast(latlon_features(meta.latlon)))),
            self.month(Tensor(cast(cyclic(meta.month, 12)))),
            self.hour(Tensor(cast(cyclic(meta.hour, 24)))),
            self.audio_source(meta.audio_source),
            self.text_source(meta.text_source),
        ]
        tokens = ag.stack(toks, axis=1)
        present = np.asarray(meta.present, dtype=bool)
        return tokens * present[:, :, None].astype(dtype), present

    def meta_tokens(self, meta: Metadata) -> list[np.ndarray]:
        """Embedded tokens for the present components of one record."""
        tokens, present = self.embed_metadata(MetadataBatch.stack([meta]))
        return [tokens.data[0, j] for j in range(len(COMPONENTS)) if present[0, j]]

    def __call__(self, h_i: Tensor, meta: MetadataBatch | None) -> GaussianEmbedding:
        b, d = h_i.shape
        dtype = h_i.dtype
        special = self.special + np.zeros((b, 1, d), dtype=dtype)
        parts = [special, h_i.reshape(b, 1, d)]
        mask = [np.ones((b, 2), dtype=bool)]
        if meta is not None:
            tokens, present = self.embed_metadata(meta, dtype)
            parts.append(tokens)
            mask.append(present)
        x = ag.concat(parts, axis=1)
        out = self.body(x, key_mask=np.concatenate(mask, axis=1))
        return self.head(out[:, 0, :])

    def fuse_tokens(self, h_i: Tensor, tokens: list) -> GaussianEmbedding:
        """Fuse one feature vector with an explicit list of meta tokens (any order)."""
        h_i = h_i if isinstance(h_i, Tensor) else Tensor(np.asarray(h_i, dtype=self.special.dtype))
        d = h_i.shape[-1]
        parts = [self.special.reshape(1, 1, d), h_i.reshape(1, 1, d)]
        parts += [(t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=h_i.dtype))).reshape(1, 1, d)
                  for t in tokens]
        out = self.body(ag.concat(parts, axis=1))
        return self.head(out[:, 0, :])
