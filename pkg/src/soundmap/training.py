"""Batch assembly, the optimization loop and checkpoint round-trips."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .encoders import eval_view, pad_tokens, train_view
from .errors import ConfigError, ContractError
from .fusion import Metadata, MetadataBatch, dropout_mask
from .geodata import GeoSample, PayloadStore
from .model import ModelConfig, TriModalModel, no_decay_names
from .numerics import checkpoint as ckpt
from .numerics.autograd import backward, zero_grad
from .numerics.optim import AdamState, LrSchedule, adam_step, cosine_warmup_lr
from .probloss import LossBreakdown, total_loss
from .rng import derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    warmup_steps: int = 200
    lr_base: float = 5e-5
    weight_decay: float = 0.2
    zoom_set: tuple[int, ...] = (1, 3, 5)
    loss_kind: str = "pcmepp"
    alpha: float = 0.1
    beta: float = 1e-4
    meta_dropout: float = 0.5
    augment: bool = True
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "zoom_set", tuple(int(z) for z in self.zoom_set))
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.zoom_set or min(self.zoom_set) < 1:
            raise ConfigError(f"zoom_set must hold levels >= 1, got {self.zoom_set}")
        if self.loss_kind not in ("pcmepp", "infonce"):
            raise ConfigError(f"loss_kind must be pcmepp or infonce, got {self.loss_kind!r}")
        if not 0.0 <= self.meta_dropout <= 1.0:
            raise ConfigError("meta_dropout must lie in [0, 1]")

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        d = asdict(self)
        d["zoom_set"] = list(self.zoom_set)
        return d

    def schedule(self) -> LrSchedule | None:
        if self.steps == 0:
            return None
        return LrSchedule(max(1, min(self.warmup_steps, self.steps)), self.steps, self.lr_base)


# desk-scale preset used by the acceptance runs; the dataclass defaults keep the large-batch recipe
DESK = dict(batch_size=32, lr_base=1e-3, warmup_steps=100)


@dataclass
class TripletBatch:
    ids: list[str]
    images: np.ndarray
    zooms: np.ndarray
    audio: np.ndarray
    tokens: np.ndarray
    meta: MetadataBatch
    match: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.match is None:
            self.match = np.eye(len(self.ids), dtype=bool)


@dataclass
class ModelState:
    model: TriModalModel
    opt: AdamState
    train_config: TrainConfig

    @property
    def step(self) -> int:
        return self.opt.step


class TrainingDiverged(ContractError):
    pass


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample positions for ``step`` in a stream of per-epoch permutations (no replacement within an epoch)."""
    if n < batch_size:
        raise ConfigError(f"{n} samples cannot fill a batch of {batch_size}")
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = derive_rng(seed, "epoch", epoch).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take])
        pos += take
    return np.asarray(out)


def make_batch(samples: list[GeoSample], store: PayloadStore, config: TrainConfig,
               model_config: ModelConfig, step: int) -> TripletBatch:
    """Deterministic in ``(config.seed, step)``: sampling, zoom draws, augmentation, metadata dropout."""
    idx = batch_indices(len(samples), config.batch_size, config.seed, step)
    chosen = [samples[i] for i in idx]
    zoom_rng = derive_rng(config.seed, "zoom", step)
    zooms = zoom_rng.choice(np.asarray(config.zoom_set), size=len(chosen))
    aug_rng = derive_rng(config.seed, "augment", step)
    images = []
    for s, l in zip(chosen, zooms):
        tile = store[s.image_ref]
        if config.augment:
            images.append(train_view(tile, int(l), model_config.zoom_hw, model_config.input_hw, aug_rng))
        else:
            images.append(eval_view(tile, int(l), model_config.zoom_hw, model_config.input_hw))
    meta = MetadataBatch.stack([Metadata.from_sample(s) for s in chosen])
    present = dropout_mask(meta.present, config.meta_dropout, derive_rng(config.seed, "meta-drop", step))
    return TripletBatch(
        ids=[s.id for s in chosen],
        images=np.stack(images),
        zooms=zooms,
        audio=np.stack([store[s.audio_ref] for s in chosen]),
        tokens=pad_tokens([s.caption for s in chosen]),
        meta=meta.with_present(present),
    )


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> ModelState:
    model = TriModalModel(model_config, seed=train_config.seed)
    opt = AdamState(lr_base=train_config.lr_base, weight_decay=train_config.weight_decay)
    return ModelState(model, opt, train_config)


def forward_loss(model: TriModalModel, batch: TripletBatch, config: TrainConfig):
    emb = {
        "i": model.embed_image(batch.images, batch.zooms, batch.meta),
        "a": model.embed_audio(batch.audio),
        "t": model.embed_text(batch.tokens),
    }
    return total_loss(emb, model.loss, config.alpha, config.beta, config.loss_kind)


def train_step(state: ModelState, batch: TripletBatch) -> LossBreakdown:
    config = state.train_config
    params = state.model.named_parameters()
    zero_grad(params.values())
    loss, breakdown = forward_loss(state.model, batch, config)
    if not math.isfinite(breakdown.total):
        raise TrainingDiverged(f"non-finite loss at step {state.step}; batch ids: {batch.ids}")
    grads = backward(loss, params)
    sched = config.schedule()
    lr = cosine_warmup_lr(min(state.step + 1, sched.total_steps), sched) if sched else 0.0
    arrays = {k: p.data for k, p in params.items()}
    adam_step(arrays, grads, state.opt, lr, no_decay_names(state.model))
    zero_grad(params.values())
    breakdown.lr = lr
    return breakdown


def fit(samples: list[GeoSample], store: PayloadStore, model_config: ModelConfig, config: TrainConfig,
        out_dir: str | os.PathLike | None = None,
        eval_fn: Callable[[ModelState], dict] | None = None,
        state: ModelState | None = None) -> tuple[ModelState, list[dict]]:
    """Run ``config.steps`` optimizer steps (resuming from ``state`` if given).

    With ``out_dir`` set, appends each step's loss breakdown to ``train_log.jsonl``
    and writes ``checkpoint/`` at the end (plus ``checkpoint-<step>/`` every
    ``checkpoint_every`` steps).
    """
    state = state or init_state(model_config, config)
    history: list[dict] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a")
    try:
        while state.step < config.steps:
            step = state.step
            batch = make_batch(samples, store, config, model_config, step)
            br = train_step(state, batch)
            rec = {"step": step, "lr": br.lr, **br.to_json()}
            if eval_fn is not None and config.eval_every and (step + 1) % config.eval_every == 0:
                rec["eval"] = eval_fn(state)
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if step % 100 == 0:
                log.info("step %d lr %.3g loss %.5f", step, br.lr, br.total)
            if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint-{step + 1}", state)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", state)
    return state, history


# -- checkpoints -----------------------------------------------------------------
def save_checkpoint(directory: str | os.PathLike, state: ModelState) -> None:
    arrays = {f"param/{k}": v for k, v in state.model.state_arrays().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    o = state.opt
    meta = {
        "model_config": state.model.config.to_json(),
        "train_config": state.train_config.to_json(),
        "step": o.step,
        "adam": {"lr_base": o.lr_base, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
                 "weight_decay": o.weight_decay},
    }
    ckpt.save_arrays(directory, arrays, meta)


def load_checkpoint(directory: str | os.PathLike) -> ModelState:
    arrays, meta = ckpt.load_arrays(directory)
    model_config = ModelConfig.from_json(meta["model_config"])
    train_config = TrainConfig.from_json(meta["train_config"])
    model = TriModalModel(model_config, seed=train_config.seed)
    model.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = AdamState(step=int(meta["step"]), **meta["adam"])
    opt.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}
    return ModelState(model, opt, train_config)
