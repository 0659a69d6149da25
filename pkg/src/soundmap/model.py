"""The tri-modal model: image encoder + metadata fusion, audio and text encoders."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .encoders import AudioEncoder, GaussianEmbedding, GsdConfig, ImageEncoder, ProbHead, TextEncoder
from .errors import ConfigError
from .fusion import MetadataBatch, MetadataFusion
from .numerics.autograd import Tensor
from .numerics.nn import Module
from .probloss import LossParams
from .rng import derive_rng


@dataclass(frozen=True)
class ModelConfig:
    d: int = 512
    image_channels: int = 16
    zoom_hw: tuple[int, int] = (10, 10)
    input_hw: tuple[int, int] = (8, 8)
    patch: int = 4
    max_zoom: int = 5
    gsd_g: float = 0.6
    gsd_G: float = 0.6
    image_width: int = 128
    image_heads: int = 4
    image_depth: int = 2
    audio_dim: int = 32
    audio_width: int = 256
    vocab_size: int = 129
    text_width: int = 128
    text_heads: int = 4
    text_depth: int = 2
    fusion_depth: int = 3
    fusion_heads: int = 8
    fusion_ff_mult: int = 2
    # small heads put initial distances where a = 10 gives a responsive sigmoid
    log_var_init: float = -9.0
    mu_init_scale: float = 0.03
    a_init: float = 10.0
    b_init: float = 0.0
    temperature: float = 0.07

    def __post_init__(self):
        object.__setattr__(self, "zoom_hw", tuple(self.zoom_hw))
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        if self.d < 1 or self.d % self.fusion_heads:
            raise ConfigError(f"d={self.d} must be positive and divisible by fusion_heads")
        if self.input_hw[0] % self.patch or self.input_hw[1] % self.patch:
            raise ConfigError("input_hw must be divisible by patch")

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        d = asdict(self)
        d["zoom_hw"] = list(self.zoom_hw)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def for_store(cls, info: dict, **overrides) -> "ModelConfig":
        """Size the input layers from a payload store's info block."""
        base = dict(image_channels=int(info["image_channels"]), audio_dim=int(info["audio_dim"]),
                    vocab_size=int(info["vocab_size"]))
        base.update(overrides)
        return cls(**base)


class TriModalModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        gsd = GsdConfig(c.gsd_g, c.gsd_G, c.image_width)
        self.image = ImageEncoder(c.image_channels, c.input_hw, c.patch, c.image_width, c.image_heads,
                                  c.image_depth, c.d, gsd, derive_rng(seed, "init", "image"))
        self.fusion = MetadataFusion(c.d, c.fusion_depth, c.fusion_heads, derive_rng(seed, "init", "fusion"),
                                     c.fusion_ff_mult, log_var_bias=c.log_var_init,
                                     mu_scale=c.mu_init_scale)
        self.audio = AudioEncoder(c.audio_dim, c.audio_width, c.d, derive_rng(seed, "init", "audio"))
        self.audio_head = ProbHead(c.d, c.d, derive_rng(seed, "init", "audio-head"),
                                   mu_scale=c.mu_init_scale, log_var_bias=c.log_var_init)
        self.text = TextEncoder(c.vocab_size, c.text_width, c.text_heads, c.text_depth, c.d,
                                derive_rng(seed, "init", "text"))
        self.text_head = ProbHead(c.d, c.d, derive_rng(seed, "init", "text-head"),
                                  mu_scale=c.mu_init_scale, log_var_bias=c.log_var_init)
        self.loss = LossParams(c.a_init, c.b_init, c.temperature)

    def image_features(self, images: np.ndarray, zooms) -> Tensor:
        return self.image(images, zooms)

    def embed_image(self, images: np.ndarray, zooms, meta: MetadataBatch | None) -> GaussianEmbedding:
        return self.fusion(self.image(images, zooms), meta)

    def embed_audio(self, features: np.ndarray) -> GaussianEmbedding:
        return self.audio_head(self.audio(features))

    def embed_text(self, tokens) -> GaussianEmbedding:
        return self.text_head(self.text(tokens))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def no_decay_names(model: TriModalModel) -> frozenset[str]:
    """Biases, norm gains and loss scalars are excluded from weight decay."""
    out = set()
    for name in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "gamma", "beta", "b", "a_log", "logit_scale") or name.startswith("loss."):
            out.add(name)
    return frozenset(out)
