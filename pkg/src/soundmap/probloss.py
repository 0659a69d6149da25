"""Closed-form probabilistic contrastive objective.

Distances between diagonal Gaussians are ``||mu_p - mu_q||^2 + ||var_p + var_q||_1``.
Each modality pair gets a sigmoid matching loss over all batch pairs, a
pseudo-positive term for negatives that sit at least as close as the true
match, and a KL-to-standard-normal term that keeps variances from collapsing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import GaussianEmbedding
from .errors import ConfigError, ContractError
from .numerics import autograd as ag
from .numerics.autograd import Tensor
from .numerics.nn import Module, param

PAIRS = (("a", "t"), ("a", "i"), ("i", "t"))
ACC = np.float64


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def csd(zp: GaussianEmbedding, zq: GaussianEmbedding) -> float:
    mp, mq = np.asarray(_arr(zp.mu), ACC), np.asarray(_arr(zq.mu), ACC)
    if mp.shape != mq.shape:
        raise ContractError(f"dimension mismatch: {mp.shape} vs {mq.shape}")
    vp = np.exp(np.asarray(_arr(zp.log_var), ACC))
    vq = np.exp(np.asarray(_arr(zq.log_var), ACC))
    diff = mp - mq
    return float(diff @ diff + np.abs(vp + vq).sum())


def csd_from_var(mu_p, var_p, mu_q, var_q) -> float:
    """Same distance with variances given directly (allows var = 0)."""
    diff = np.asarray(mu_p, ACC) - np.asarray(mu_q, ACC)
    return float(diff @ diff + np.abs(np.asarray(var_p, ACC) + np.asarray(var_q, ACC)).sum())


def csd_matrix_np(queries: GaussianEmbedding, gallery: GaussianEmbedding, chunk: int = 256) -> np.ndarray:
    """(Nq, Ng) distances in float64 without the autograd graph."""
    mq = np.asarray(_arr(queries.mu), ACC)
    mg = np.asarray(_arr(gallery.mu), ACC)
    if mq.shape[-1] != mg.shape[-1]:
        raise ContractError(f"dimension mismatch: {mq.shape[-1]} vs {mg.shape[-1]}")
    sq = np.exp(np.asarray(_arr(queries.log_var), ACC)).sum(-1)
    sg = np.exp(np.asarray(_arr(gallery.log_var), ACC)).sum(-1)
    out = np.empty((len(mq), len(mg)))
    for start in range(0, len(mq), chunk):
        diff = mq[start:start + chunk, None, :] - mg[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out + sq[:, None] + sg[None, :]


def csd_matrix(zp: GaussianEmbedding, zq: GaussianEmbedding) -> Tensor:
    """Differentiable (B, B) distance matrix, rows indexed by ``zp``."""
    mp, mq = zp.mu, zq.mu
    if mp.shape[-1] != mq.shape[-1]:
        raise ContractError(f"dimension mismatch: {mp.shape} vs {mq.shape}")
    b, d = mp.shape
    diff = mp.reshape(b, 1, d) - mq.reshape(1, mq.shape[0], d)
    sq = (diff * diff).sum(axis=-1)
    vp = ag.exp(zp.log_var).sum(axis=-1).reshape(b, 1)
    vq = ag.exp(zq.log_var).sum(axis=-1).reshape(1, mq.shape[0])
    return sq + vp + vq


class LossParams(Module):
    """Learnable scale ``a = exp(a_log)`` and shift ``b``; plus an InfoNCE log-scale."""

    def __init__(self, a_init: float = 10.0, b_init: float = 0.0, temperature: float = 0.07):
        self.a_log = param(np.array([math.log(a_init)]))
        self.b = param(np.array([b_init]))
        self.logit_scale = param(np.array([math.log(1.0 / temperature)]))

    @property
    def a(self) -> Tensor:
        return ag.exp(self.a_log)


def match_loss_np(d, w, a: float, b: float) -> np.ndarray:
    """Scalar/array form of the matching loss for given a, b."""
    d = np.asarray(d, ACC)
    w = np.asarray(w, ACC)
    z = -a * d + b

    def log_sig(x):
        return np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))

    return -(w * log_sig(z) + (1 - w) * log_sig(-z))


def match_loss(d: Tensor, w: np.ndarray, params: LossParams) -> Tensor:
    """Elementwise -[w log sig(-a d + b) + (1 - w) log sig(a d - b)]."""
    a = params.a.astype(d.dtype)
    b = params.b.astype(d.dtype)
    z = (d * a - b) * -1.0
    w = np.asarray(w, dtype=d.dtype)
    return -(ag.log_sigmoid(z) * w + ag.log_sigmoid(-z) * (1.0 - w))


def mine_pseudo_positives(D: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Mark q' as pseudo-positive for anchor p when D[p, q'] <= D[p, q_true]."""
    D = np.asarray(_arr(D))
    w = np.asarray(w).astype(bool)
    if D.shape != w.shape or D.ndim != 2:
        raise ContractError(f"distance {D.shape} and match {w.shape} matrices must be equal 2-D")
    n_pos = w.sum(axis=1)
    if (n_pos != 1).any():
        bad = int(np.flatnonzero(n_pos != 1)[0])
        raise ContractError(f"row {bad} has {int(n_pos[bad])} positives, expected exactly 1")
    pos_d = D[w]
    return (D <= pos_d[:, None]) & ~w


def vib_loss(z: GaussianEmbedding) -> Tensor:
    """KL(N(mu, diag var) || N(0, I)) summed over dims, averaged over the batch."""
    mu = z.mu if isinstance(z.mu, Tensor) else Tensor(np.asarray(z.mu, ACC))
    lv = z.log_var if isinstance(z.log_var, Tensor) else Tensor(np.asarray(z.log_var, ACC))
    mu, lv = mu.astype(ACC), lv.astype(ACC)
    kl = (mu * mu + ag.exp(lv) - lv - 1.0).sum(axis=-1) * 0.5
    return kl.mean()


@dataclass
class LossBreakdown:
    match: dict[str, float]
    pseudo: dict[str, float]
    vib: dict[str, float]
    total: float
    alpha: float = 0.0
    beta: float = 0.0
    lr: float = 0.0
    pseudo_masks: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def pair_total(self, pair: str) -> float:
        return self.match[pair] + self.alpha * self.pseudo[pair] + self.beta * self.vib[pair]

    def to_json(self) -> dict:
        out = {}
        for kind in ("match", "pseudo", "vib"):
            for pair, v in getattr(self, kind).items():
                out[f"{kind}_{pair}"] = v
        out["total"] = self.total
        return out


def _pair_terms(zp: GaussianEmbedding, zq: GaussianEmbedding, params: LossParams):
    D = csd_matrix(zp, zq).astype(ACC)
    b = D.shape[0]
    w = np.eye(b, dtype=bool)
    pseudo = mine_pseudo_positives(D.data, w)
    losses = match_loss(D, w, params)
    scale = 1.0 / (b * b)
    m = (losses * (~pseudo).astype(ACC)).sum() * scale
    if pseudo.any():
        ps = (match_loss(D, np.ones_like(w), params) * pseudo.astype(ACC)).sum() * scale
    else:
        ps = Tensor(np.zeros((), ACC))
    return m, ps, pseudo


def _infonce_pair(zp: GaussianEmbedding, zq: GaussianEmbedding, params: LossParams) -> Tensor:
    mp = zp.mu.astype(ACC)
    mq = zq.mu.astype(ACC)
    np_ = mp / ag.l2_norm(mp, axis=-1, eps=1e-12).reshape(-1, 1)
    nq = mq / ag.l2_norm(mq, axis=-1, eps=1e-12).reshape(-1, 1)
    logits = (np_ @ nq.T) * ag.exp(params.logit_scale.astype(ACC))
    idx = np.arange(logits.shape[0])
    rows = -ag.log_softmax(logits, axis=1)[idx, idx].mean()
    cols = -ag.log_softmax(logits, axis=0)[idx, idx].mean()
    return (rows + cols) * 0.5


def total_loss(emb: dict[str, GaussianEmbedding], params: LossParams, alpha: float = 0.1,
               beta: float = 1e-4, kind: str = "pcmepp") -> tuple[Tensor, LossBreakdown]:
    """Sum over the (a,t), (a,i), (i,t) pairs; ``emb`` maps 'i', 'a', 't' to batch embeddings.

    The KL term is computed once per modality; each pair reports the mean of
    its two modalities' KL so that the pair totals add up to the overall loss.
    """
    b = emb["i"].mu.shape[0]
    if b < 2:
        raise ConfigError(f"batch size {b} < 2 leaves no negatives")
    if kind not in ("pcmepp", "infonce"):
        raise ConfigError(f"unknown loss kind {kind!r}")
    kl = {k: vib_loss(z) for k, z in emb.items()}
    terms = []
    match, pseudo, vib, masks = {}, {}, {}, {}
    for p, q in PAIRS:
        name = p + q
        if kind == "pcmepp":
            m, ps, masks[name] = _pair_terms(emb[p], emb[q], params)
        else:
            m, ps = _infonce_pair(emb[p], emb[q], params), Tensor(np.zeros((), ACC))
        v = (kl[p] + kl[q]) * 0.5
        terms.append(m + ps * alpha + v * beta if kind == "pcmepp" else m)
        match[name], pseudo[name], vib[name] = float(m.data), float(ps.data), float(v.data)
    total = terms[0] + terms[1] + terms[2]
    eff_beta = beta if kind == "pcmepp" else 0.0
    eff_alpha = alpha if kind == "pcmepp" else 0.0
    return total, LossBreakdown(match, pseudo, vib, float(total.data), eff_alpha, eff_beta,
                                pseudo_masks=masks)
