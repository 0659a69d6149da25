"""Multi-scale image handling and the modality encoders with Gaussian heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputDomainError
from .numerics import autograd as ag
from .numerics.autograd import Tensor
from .numerics.nn import MLP, Embedding, Linear, Module, Transformer

PAD_ID = 0
MAX_TOKENS = 128


@dataclass
class GaussianEmbedding:
    """Diagonal Gaussian: mean and log-variance, each (..., d).

    Fields hold autograd Tensors inside the training graph and plain arrays
    everywhere else.
    """

    mu: Tensor | np.ndarray
    log_var: Tensor | np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def var(self):
        if isinstance(self.log_var, Tensor):
            return ag.exp(self.log_var)
        return np.exp(self.log_var)

    def numpy(self) -> "GaussianEmbedding":
        mu = self.mu.data if isinstance(self.mu, Tensor) else np.asarray(self.mu)
        lv = self.log_var.data if isinstance(self.log_var, Tensor) else np.asarray(self.log_var)
        return GaussianEmbedding(mu, lv)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, idx) -> "GaussianEmbedding":
        return GaussianEmbedding(self.mu[idx], self.log_var[idx])


# -- zoom simulation and augmentation ---------------------------------------------
def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights with half-pixel centers (align_corners=False)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the trailing two axes of ``img``."""
    h, w = out_hw
    if img.shape[-2:] == (h, w):
        return img.copy()
    my = _resize_matrix(h, img.shape[-2]).astype(img.dtype)
    mx = _resize_matrix(w, img.shape[-1]).astype(img.dtype)
    return my @ img @ mx.T


def center_crop(img: np.ndarray, crop_hw: tuple[int, int]) -> np.ndarray:
    ch, cw = crop_hw
    H, W = img.shape[-2:]
    if ch > H or cw > W:
        raise InputDomainError(f"crop {ch}x{cw} larger than image {H}x{W}")
    top = (H - ch) // 2
    left = (W - cw) // 2
    return img[..., top:top + ch, left:left + cw]


def zoom_crop(tile: np.ndarray, l: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Center-crop ``(l*h) x (l*w)`` from the tile and resize it to ``(h, w)``."""
    if l < 1:
        raise InputDomainError(f"zoom level must be >= 1, got {l}")
    h, w = out_hw
    H, W = tile.shape[-2:]
    if l * h > H or l * w > W:
        raise InputDomainError(f"zoom {l} needs a {l * h}x{l * w} crop from a {H}x{W} tile")
    return resize_bilinear(center_crop(tile, (l * h, l * w)), (h, w))


def random_resized_crop(img: np.ndarray, out_hw: tuple[int, int], rng: np.random.Generator,
                        scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Random area/aspect crop resized to ``out_hw`` (torchvision semantics)."""
    H, W = img.shape[-2:]
    area = H * W
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ar)))
        h = int(round(math.sqrt(target / ar)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return resize_bilinear(img[..., top:top + h, left:left + w], out_hw)
    side = min(H, W)
    return resize_bilinear(center_crop(img, (side, side)), out_hw)


def train_view(tile: np.ndarray, l: int, zoom_hw, input_hw, rng: np.random.Generator) -> np.ndarray:
    """Zoom, random resized crop, random horizontal flip."""
    img = random_resized_crop(zoom_crop(tile, l, zoom_hw), input_hw, rng)
    if rng.random() < 0.5:
        img = img[..., ::-1]
    return np.ascontiguousarray(img, dtype=np.float32)


def eval_view(tile: np.ndarray, l: int, zoom_hw, input_hw) -> np.ndarray:
    return np.ascontiguousarray(center_crop(zoom_crop(tile, l, zoom_hw), input_hw), dtype=np.float32)


# -- scale-aware positional embedding -------------------------------------------------
@dataclass(frozen=True)
class GsdConfig:
    g: float = 0.6
    G: float = 0.6
    d_model: int = 128

    def __post_init__(self):
        if self.g <= 0 or self.G <= 0:
            raise InputDomainError("GSD values must be positive")
        if self.d_model % 2:
            raise InputDomainError("d_model must be even")


def gsd_pos_embed(num_patches_x: int, num_patches_y: int, l: float, cfg: GsdConfig) -> np.ndarray:
    """(patches, d_model) embedding of patch position and ground scale.

    Even slot 2i holds sin(s * x / 10000^(2i/d)), odd slot 2i+1 holds
    cos(s * y / 10000^(2i/d)), with s = g*l/G. Patches are row-major in (y, x).
    """
    d = cfg.d_model
    s = cfg.g * l / cfg.G
    inv_freq = 1.0 / 10000 ** (np.arange(0, d, 2) / d)
    ys, xs = np.meshgrid(np.arange(num_patches_y), np.arange(num_patches_x), indexing="ij")
    xs = xs.reshape(-1, 1).astype(np.float64)
    ys = ys.reshape(-1, 1).astype(np.float64)
    out = np.empty((num_patches_x * num_patches_y, d))
    out[:, 0::2] = np.sin(s * xs * inv_freq)
    out[:, 1::2] = np.cos(s * ys * inv_freq)
    return out


# -- encoders -----------------------------------------------------------------------------
def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ContractError(f"image {h}x{w} not divisible by patch {patch}")
    ny, nx = h // patch, w // patch
    x = images.reshape(b, c, ny, patch, nx, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, ny * nx, c * patch * patch)


class ImageEncoder(Module):
    def __init__(self, channels: int, input_hw: tuple[int, int], patch: int, width: int, heads: int,
                 depth: int, d: int, gsd: GsdConfig, rng: np.random.Generator):
        self.channels = channels
        self.input_hw = tuple(input_hw)
        self.patch = patch
        self.gsd = GsdConfig(gsd.g, gsd.G, width)
        self.embed = Linear(channels * patch * patch, width, rng)
        self.body = Transformer(width, heads, depth, rng)
        self.proj = Linear(width, d, rng)
        self._pos_cache: dict[int, np.ndarray] = {}

    def _pos(self, l: int, dtype) -> np.ndarray:
        if l not in self._pos_cache:
            ny, nx = self.input_hw[0] // self.patch, self.input_hw[1] // self.patch
            self._pos_cache[l] = gsd_pos_embed(nx, ny, l, self.gsd)
        return self._pos_cache[l].astype(dtype)

    def __call__(self, images: np.ndarray, zooms) -> Tensor:
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != self.channels or images.shape[2:] != self.input_hw:
            raise ContractError(
                f"expected images (B, {self.channels}, {self.input_hw[0]}, {self.input_hw[1]}), "
                f"got {images.shape}")
        dtype = self.embed.weight.dtype
        zooms = np.broadcast_to(np.asarray(zooms), (images.shape[0],))
        pos = np.stack([self._pos(int(l), dtype) for l in zooms])
        x = self.embed(Tensor(patchify(images, self.patch).astype(dtype))) + pos
        x = self.body(x).mean(axis=1)
        return self.proj(x)


class AudioEncoder(Module):
    def __init__(self, audio_dim: int, width: int, d: int, rng: np.random.Generator):
        self.audio_dim = audio_dim
        self.mlp = MLP([audio_dim, width, width, width], rng)
        self.proj = Linear(width, d, rng)

    def __call__(self, features: np.ndarray) -> Tensor:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.audio_dim:
            raise ContractError(f"expected audio features (B, {self.audio_dim}), got {features.shape}")
        x = Tensor(features.astype(self.proj.weight.dtype))
        return self.proj(ag.gelu(self.mlp(x)))


def pad_tokens(seqs, max_len: int = MAX_TOKENS) -> np.ndarray:
    seqs = [list(s)[:max_len] for s in seqs]
    if any(len(s) == 0 for s in seqs):
        raise InputDomainError("empty token sequence")
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


class TextEncoder(Module):
    def __init__(self, vocab_size: int, width: int, heads: int, depth: int, d: int,
                 rng: np.random.Generator, max_len: int = MAX_TOKENS):
        self.vocab_size = vocab_size
        self.tokens = Embedding(vocab_size, width, rng)
        self.positions = Embedding(max_len, width, rng)
        self.body = Transformer(width, heads, depth, rng)
        self.proj = Linear(width, d, rng)

    def __call__(self, token_ids) -> Tensor:
        ids = token_ids if isinstance(token_ids, np.ndarray) else pad_tokens(token_ids)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputDomainError("empty token sequence")
        present = ids != PAD_ID
        if not present.any(axis=1).all():
            raise InputDomainError("empty token sequence")
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise InputDomainError(f"token id outside vocabulary of {self.vocab_size}")
        x = self.tokens(ids) + self.positions(np.arange(ids.shape[1]))
        x = self.body(x, key_mask=present)
        weights = (present / present.sum(axis=1, keepdims=True)).astype(x.dtype)[:, :, None]
        return self.proj((x * weights).sum(axis=1))


class ProbHead(Module):
    """Two affine maps: mean and log-variance."""

    def __init__(self, n_in: int, d: int, rng: np.random.Generator | None, mu_scale: float = 1.0,
                 log_var_scale: float = 0.1, log_var_bias: float = 0.0):
        self.mu = Linear(n_in, d, rng, scale=mu_scale)
        self.log_var = Linear(n_in, d, rng, scale=log_var_scale)
        self.log_var.bias.data[:] = log_var_bias

    def __call__(self, h: Tensor) -> GaussianEmbedding:
        return GaussianEmbedding(self.mu(h), self.log_var(h))


__all__ = [
    "AudioEncoder",
    "GaussianEmbedding",
    "GsdConfig",
    "ImageEncoder",
    "ProbHead",
    "TextEncoder",
    "center_crop",
    "eval_view",
    "gsd_pos_embed",
    "pad_tokens",
    "random_resized_crop",
    "resize_bilinear",
    "train_view",
    "zoom_crop",
]
