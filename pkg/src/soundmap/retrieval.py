"""Cross-modal retrieval metrics: rank by distance, Recall@10% and median rank."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .encoders import GaussianEmbedding, eval_view, pad_tokens
from .errors import ConfigError, ContractError
from .fusion import Metadata, MetadataBatch
from .geodata import GeoSample, PayloadStore
from .numerics.autograd import no_grad
from .probloss import csd_matrix_np

DIRECTIONS = ("i2a", "a2i")


def _stack(items) -> GaussianEmbedding:
    if isinstance(items, GaussianEmbedding):
        return items.numpy()
    items = [z.numpy() for z in items]
    return GaussianEmbedding(np.stack([z.mu for z in items]), np.stack([z.log_var for z in items]))


def ranks_from_distances(D: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based rank of ``truth[q]`` in row q of D; ties go to the lower gallery index."""
    D = np.asarray(D)
    truth = np.asarray(truth)
    n = D.shape[1]
    if truth.min(initial=0) < 0 or truth.max(initial=0) >= n:
        raise ContractError(f"truth index outside gallery of {n}")
    td = D[np.arange(len(D)), truth][:, None]
    closer = (D < td).sum(axis=1)
    tied_before = ((D == td) & (np.arange(n)[None, :] < truth[:, None])).sum(axis=1)
    return 1 + closer + tied_before


def rank_gallery(query: GaussianEmbedding, gallery, truth_index: int) -> int:
    if len(gallery) == 0:
        raise ContractError("empty gallery")
    g = _stack(gallery)
    n = len(g.mu)
    if not 0 <= truth_index < n:
        raise ContractError(f"truth index {truth_index} outside gallery of {n}")
    q = query.numpy()
    D = csd_matrix_np(GaussianEmbedding(q.mu[None], q.log_var[None]), g)
    return int(ranks_from_distances(D, np.array([truth_index]))[0])


def recall_at_pct(ranks, n: int, pct: float = 0.10) -> float:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        return 0.0
    cutoff = math.ceil(pct * n - 1e-9)
    return float(np.mean(ranks <= cutoff))


def median_rank(ranks) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise ContractError("median of an empty rank list")
    return float(np.median(ranks))


def compose_query(primary: GaussianEmbedding, text: GaussianEmbedding | None) -> GaussianEmbedding:
    """Sum of independent Gaussians: means add, variances add."""
    if text is None:
        return primary
    p, t = primary.numpy(), text.numpy()
    if p.mu.shape != t.mu.shape:
        raise ContractError(f"dimension mismatch: {p.mu.shape} vs {t.mu.shape}")
    return GaussianEmbedding(p.mu + t.mu, np.log(np.exp(p.log_var) + np.exp(t.log_var)))


def compose_query_var(mu_p, var_p, mu_t=None, var_t=None):
    """Variance-space form of :func:`compose_query` (admits zero variance)."""
    if mu_t is None:
        return np.asarray(mu_p), np.asarray(var_p)
    return np.asarray(mu_p) + mu_t, np.asarray(var_p) + var_t


@dataclass(frozen=True)
class EvalSettings:
    direction: str = "i2a"
    zoom: int = 1
    use_text: bool = False
    use_metadata: bool = False

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")


@dataclass(frozen=True)
class EvalReport:
    direction: str
    zoom: int
    use_text: bool
    use_metadata: bool
    r_at_10pct: float
    mdr: float
    n: int

    def to_json(self) -> dict:
        return asdict(self)


def embed_samples(model, samples: list[GeoSample], store: PayloadStore, zoom: int, use_metadata: bool,
                  batch_size: int = 128) -> dict[str, GaussianEmbedding]:
    """Eval-mode embeddings for every sample: image (center crop, fused), audio and text."""
    cfg = model.config
    out = {"i": [], "a": [], "t": []}
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = np.stack([eval_view(store[s.image_ref], zoom, cfg.zoom_hw, cfg.input_hw) for s in chunk])
            mask = (True,) * 5 if use_metadata else (False,) * 5
            meta = MetadataBatch.stack([Metadata.from_sample(s, mask) for s in chunk])
            zi = model.embed_image(images, np.full(len(chunk), zoom), meta)
            za = model.embed_audio(np.stack([store[s.audio_ref] for s in chunk]))
            zt = model.embed_text(pad_tokens([s.caption for s in chunk]))
            for k, z in (("i", zi), ("a", za), ("t", zt)):
                out[k].append(z.numpy())
    return {k: GaussianEmbedding(np.concatenate([z.mu for z in v]), np.concatenate([z.log_var for z in v]))
            for k, v in out.items()}


def report_from_embeddings(emb: dict[str, GaussianEmbedding], settings: EvalSettings) -> tuple[EvalReport, np.ndarray]:
    q_key, g_key = ("i", "a") if settings.direction == "i2a" else ("a", "i")
    queries = compose_query(emb[q_key], emb["t"] if settings.use_text else None)
    gallery = emb[g_key]
    n = len(gallery.mu)
    D = csd_matrix_np(queries, gallery)
    ranks = ranks_from_distances(D, np.arange(n))
    rep = EvalReport(settings.direction, settings.zoom, settings.use_text, settings.use_metadata,
                     recall_at_pct(ranks, n), median_rank(ranks), n)
    return rep, ranks


def evaluate(model, samples: list[GeoSample], store: PayloadStore, settings: EvalSettings) -> EvalReport:
    if not samples:
        raise ConfigError("cannot evaluate on an empty split")
    emb = embed_samples(model, samples, store, settings.zoom, settings.use_metadata)
    return report_from_embeddings(emb, settings)[0]
