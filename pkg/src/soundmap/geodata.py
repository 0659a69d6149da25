"""Geotagged records, leakage-free grid-cell splits, and a synthetic dataset.

Splitting buckets samples into lat/lon cells, keeps sparse cells in train,
stratifies the rest by density, holds out a fraction of cells per stratum and
then draws val/test samples from the held-out cells so that their audio-source
histogram follows the train split.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError, InputDomainError, ParseError
from .rng import derive_rng

AUDIO_SOURCES = ("inaturalist", "yfcc", "aporee", "freesound")
TEXT_SOURCES = ("metadata_caption", "model_caption")
SPLITS = ("train", "val", "test")
DENSITIES = ("low", "medium", "high")

# GeoSound per-source sample counts, used as default synthetic proportions
_SOURCE_WEIGHTS = np.array([114603, 96452, 49284, 48680], dtype=float)


@dataclass(frozen=True)
class GeoSample:
    id: str
    lat: float
    lon: float
    month: int
    hour: int
    audio_source: str
    text_source: str
    image_ref: str
    audio_ref: str
    caption: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "caption", tuple(int(t) for t in self.caption))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise InputDomainError("id must be a non-empty string")
        if not -90.0 <= self.lat <= 90.0:
            raise InputDomainError(f"lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise InputDomainError(f"lon {self.lon} outside [-180, 180)")
        if not 1 <= self.month <= 12:
            raise InputDomainError(f"month {self.month} outside 1..12")
        if not 0 <= self.hour <= 23:
            raise InputDomainError(f"hour {self.hour} outside 0..23")
        if self.audio_source not in AUDIO_SOURCES:
            raise InputDomainError(f"unknown audio_source {self.audio_source!r}")
        if self.text_source not in TEXT_SOURCES:
            raise InputDomainError(f"unknown text_source {self.text_source!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["caption"] = list(self.caption)
        return d


class CellKey(NamedTuple):
    cell_lat: int
    cell_lon: int


def cell_key(lat: float, lon: float, cell_size_deg: float = 1.0) -> CellKey:
    if cell_size_deg <= 0:
        raise InputDomainError(f"cell_size_deg must be positive, got {cell_size_deg}")
    if not -90.0 <= lat <= 90.0:
        raise InputDomainError(f"lat {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise InputDomainError(f"lon {lon} outside [-180, 180]")
    if lon == 180.0:
        lon = -180.0
    return CellKey(math.floor(lat / cell_size_deg), math.floor(lon / cell_size_deg))


# -- manifests -----------------------------------------------------------------
def save_manifest(path: str | os.PathLike, samples: Iterable[GeoSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike) -> list[GeoSample]:
    """Parse a JSON-lines manifest; errors carry the 1-based line number."""
    samples: list[GeoSample] = []
    seen: set[str] = set()
    fields = set(GeoSample.__dataclass_fields__)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", str(path), lineno) from None
            if not isinstance(rec, dict) or set(rec) != fields:
                got = sorted(rec) if isinstance(rec, dict) else type(rec).__name__
                raise ParseError(f"expected fields {sorted(fields)}, got {got}", str(path), lineno)
            try:
                sample = GeoSample(**rec)
            except (InputDomainError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), str(path), lineno) from None
            if sample.id in seen:
                raise ParseError(f"duplicate id {sample.id!r}", str(path), lineno)
            seen.add(sample.id)
            samples.append(sample)
    return samples


# -- splitting -------------------------------------------------------------------
@dataclass(frozen=True)
class SplitConfig:
    cell_size_deg: float = 1.0
    min_cell_count: int = 25
    holdout_fraction: float = 0.10
    val_cell_fraction: float = 0.40
    val_count: int | None = None
    test_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.cell_size_deg <= 0:
            raise ConfigError("cell_size_deg must be positive")
        if self.min_cell_count < 1:
            raise ConfigError("min_cell_count must be >= 1")
        for name in ("holdout_fraction", "val_cell_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("val_count", "test_count"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class CellRecord:
    cell: CellKey
    count: int
    density: str | None  # None for cells under the threshold
    held_out: bool
    pool: str | None  # "val" / "test" for held-out cells


@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    cells: list[CellRecord]
    # held-out samples not drawn into val/test; kept out of train to avoid leakage
    excluded: list[str] = field(default_factory=list)
    thresholds: tuple[int, int] | None = None

    def ids(self, split: str) -> list[str]:
        return [k for k, v in self.assignment.items() if v == split]

    def to_json(self) -> dict:
        return {
            "assignment": self.assignment,
            "excluded": self.excluded,
            "thresholds": list(self.thresholds) if self.thresholds else None,
            "cells": [{"cell": list(c.cell), "count": c.count, "density": c.density,
                       "held_out": c.held_out, "pool": c.pool} for c in self.cells],
        }


def nearest_rank_quantile(values: Iterable[int], q: float) -> int:
    v = sorted(values)
    if not v:
        raise ValueError("quantile of empty sequence")
    k = max(1, math.ceil(q * len(v)))
    return v[min(k, len(v)) - 1]


def density_thresholds(counts: list[int]) -> tuple[int, int]:
    """Low/high cut points from the 0.33/0.66 nearest-rank quantiles.

    A cell is low if count <= t1, medium if t1 < count <= t2, else high.
    When at least three distinct counts exist, the cuts are nudged so that no
    class is empty.
    """
    t1 = nearest_rank_quantile(counts, 0.33)
    t2 = nearest_rank_quantile(counts, 0.66)
    distinct = sorted(set(counts))
    if len(distinct) >= 3:
        t1 = min(t1, distinct[-3])
        above = [u for u in distinct if u > t1]
        t2 = max(t2, above[0])
        t2 = min(t2, distinct[-2])
    return t1, t2


def largest_remainder(total: int, weights: dict[str, float]) -> dict[str, int]:
    """Apportion ``total`` over keys proportionally; ties favour earlier keys."""
    wsum = sum(weights.values())
    if wsum <= 0:
        raise ConfigError("cannot apportion over an empty distribution")
    quotas = {k: total * w / wsum for k, w in weights.items()}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    short = total - sum(alloc.values())
    order = sorted(weights, key=lambda k: -(quotas[k] - alloc[k]))
    for k in order[:short]:
        alloc[k] += 1
    return alloc


def _round_count(fraction: float, n: int) -> int:
    return min(n, max(1, math.floor(fraction * n + 0.5))) if n else 0


def assign_splits(samples: list[GeoSample], config: SplitConfig) -> SplitAssignment:
    if not samples:
        raise ConfigError("cannot split an empty sample list")
    buckets: dict[CellKey, list[GeoSample]] = defaultdict(list)
    for s in samples:
        buckets[cell_key(s.lat, s.lon, config.cell_size_deg)].append(s)
    keys = sorted(buckets)

    eligible = [k for k in keys if len(buckets[k]) >= config.min_cell_count]
    density: dict[CellKey, str] = {}
    thresholds = None
    if eligible:
        thresholds = density_thresholds([len(buckets[k]) for k in eligible])
        t1, t2 = thresholds
        for k in eligible:
            c = len(buckets[k])
            density[k] = "low" if c <= t1 else "medium" if c <= t2 else "high"

    rng = derive_rng(config.seed, "split")
    held: list[CellKey] = []
    for cls in DENSITIES:
        members = [k for k in eligible if density[k] == cls]
        if not members:
            continue
        # every stratum keeps at least one training cell
        n_hold = min(_round_count(config.holdout_fraction, len(members)), len(members) - 1)
        pick = rng.permutation(len(members))[:n_hold]
        held.extend(members[i] for i in sorted(pick))
    held.sort()
    pool_of: dict[CellKey, str] = {}
    if held:
        order = rng.permutation(len(held))
        n_val = _round_count(config.val_cell_fraction, len(held))
        if len(held) >= 2:
            n_val = min(n_val, len(held) - 1)
        for rank, i in enumerate(order):
            pool_of[held[i]] = "val" if rank < n_val else "test"

    assignment: dict[str, str] = {}
    pools: dict[str, list[GeoSample]] = {"val": [], "test": []}
    for k in keys:
        if k in pool_of:
            pools[pool_of[k]].extend(buckets[k])
        else:
            for s in buckets[k]:
                assignment[s.id] = "train"

    train_hist = Counter(s.audio_source for s in samples if assignment.get(s.id) == "train")
    excluded: list[str] = []
    for split, want in (("val", config.val_count), ("test", config.test_count)):
        pool = pools[split]
        if want is None:
            for s in pool:
                assignment[s.id] = split
            continue
        if len(pool) < want:
            raise ConfigError(f"{split} pool holds {len(pool)} samples, {want} requested")
        weights = {src: train_hist.get(src, 0) for src in AUDIO_SOURCES}
        targets = largest_remainder(want, weights)
        by_src: dict[str, list[GeoSample]] = defaultdict(list)
        for s in pool:
            by_src[s.audio_source].append(s)
        chosen: set[str] = set()
        draw_rng = derive_rng(config.seed, "split-draw", split)
        for src in AUDIO_SOURCES:
            cand = by_src.get(src, [])
            need = targets[src]
            if need > len(cand):
                raise ConfigError(
                    f"{split} pool has {len(cand)} '{src}' samples, {need} needed to match train")
            for i in draw_rng.permutation(len(cand))[:need]:
                chosen.add(cand[i].id)
        for s in pool:
            if s.id in chosen:
                assignment[s.id] = split
            else:
                excluded.append(s.id)

    cells = [CellRecord(k, len(buckets[k]), density.get(k), k in pool_of, pool_of.get(k)) for k in keys]
    ordered = {s.id: assignment[s.id] for s in samples if s.id in assignment}
    return SplitAssignment(ordered, cells, excluded, thresholds)


def audit_splits(samples: list[GeoSample], split: SplitAssignment, config: SplitConfig) -> dict:
    """Leakage and balance report for a split."""
    cells_by_split: dict[str, set[CellKey]] = {k: set() for k in SPLITS}
    hist: dict[str, Counter] = {k: Counter() for k in SPLITS}
    counts = Counter(cell_key(s.lat, s.lon, config.cell_size_deg) for s in samples)
    sub_threshold_violations = 0
    for s in samples:
        name = split.assignment.get(s.id)
        if name is None:
            continue
        key = cell_key(s.lat, s.lon, config.cell_size_deg)
        cells_by_split[name].add(key)
        hist[name][s.audio_source] += 1
        if counts[key] < config.min_cell_count and name != "train":
            sub_threshold_violations += 1
    shared = set()
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1:]:
            shared |= cells_by_split[a] & cells_by_split[b]
    return {
        "n_samples": len(samples),
        "split_sizes": {k: sum(hist[k].values()) for k in SPLITS},
        "n_excluded": len(split.excluded),
        "shared_cells": len(shared),
        "sub_threshold_violations": sub_threshold_violations,
        "source_histograms": {k: {src: hist[k][src] for src in AUDIO_SOURCES} for k in SPLITS},
        "cells_per_split": {k: len(v) for k, v in cells_by_split.items()},
    }


# -- payloads --------------------------------------------------------------------
class PayloadStore:
    """Named float32 arrays, saved as flat little-endian files with a JSON index."""

    INDEX = "index.json"

    def __init__(self, arrays: dict[str, np.ndarray] | None = None, info: dict | None = None):
        self.arrays: dict[str, np.ndarray] = dict(arrays or {})
        self.info: dict = dict(info or {})

    def __getitem__(self, ref: str) -> np.ndarray:
        try:
            return self.arrays[ref]
        except KeyError:
            raise KeyError(f"payload {ref!r} not in store") from None

    def __contains__(self, ref: str) -> bool:
        return ref in self.arrays

    def __setitem__(self, ref: str, arr: np.ndarray) -> None:
        self.arrays[ref] = np.asarray(arr, dtype=np.float32)

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for ref in sorted(self.arrays):
            arr = self.arrays[ref]
            fname = ref.replace("/", "__") + ".f32"
            (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            index[ref] = {"shape": list(arr.shape), "dtype": "<f4", "file": fname}
        payload = {"info": self.info, "arrays": index}
        (directory / self.INDEX).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "PayloadStore":
        directory = Path(directory)
        index = json.loads((directory / cls.INDEX).read_text())
        arrays = {}
        for ref, entry in index["arrays"].items():
            raw = (directory / entry["file"]).read_bytes()
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            arrays[ref] = arr.astype(np.float32)
        return cls(arrays, index.get("info", {}))


# -- synthetic data -----------------------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    tile_hw: int = 50
    audio_dim: int = 32
    token_bins: int = 8
    image_noise: float = 0.3
    audio_noise: float = 0.1
    n_sites: int | None = None
    mode: str = "planted"  # or "source_subspace"
    with_payloads: bool = True


def _quantize(z: np.ndarray, bins: int) -> np.ndarray:
    edges = np.linspace(-2.0, 2.0, bins - 1)
    return np.searchsorted(edges, z)


def synth_dataset(n: int, planted_dim: int, seed: int, config: SynthConfig = SynthConfig(),
                  locations: np.ndarray | None = None) -> tuple[list[GeoSample], PayloadStore]:
    """Samples whose image, audio and caption share a planted latent.

    In ``planted`` mode all three payloads carry the same latent ``z``. In
    ``source_subspace`` mode the image carries four independent latent blocks
    and the audio/caption carry only the block indexed by the sample's audio
    source, so the image alone is ambiguous without that metadata.
    ``locations`` (n x 2 lat/lon) overrides the clustered site layout.
    """
    if n < 1:
        raise ConfigError(f"synthetic dataset needs n >= 1, got {n}")
    if planted_dim < 1:
        raise ConfigError(f"planted_dim must be >= 1, got {planted_dim}")
    if config.mode not in ("planted", "source_subspace"):
        raise ConfigError(f"unknown synth mode {config.mode!r}")
    k = planted_dim
    n_blocks = len(AUDIO_SOURCES) if config.mode == "source_subspace" else 1

    meta_rng = derive_rng(seed, "synth", "meta")
    lat_lon = _synth_locations(n, seed, config) if locations is None else np.asarray(locations, float)
    if lat_lon.shape != (n, 2):
        raise ConfigError(f"locations must have shape ({n}, 2)")
    probs = _SOURCE_WEIGHTS / _SOURCE_WEIGHTS.sum()
    sources = meta_rng.choice(len(AUDIO_SOURCES), size=n, p=probs)
    text_src = meta_rng.integers(0, len(TEXT_SOURCES), size=n)
    months = meta_rng.integers(1, 13, size=n)
    hours = meta_rng.integers(0, 24, size=n)

    lat_rng = derive_rng(seed, "synth", "latent")
    image_latent = lat_rng.standard_normal((n, n_blocks * k)).astype(np.float32)
    if n_blocks == 1:
        shared = image_latent
    else:
        blocks = image_latent.reshape(n, n_blocks, k)
        shared = blocks[np.arange(n), sources]

    audio_basis = derive_rng(seed, "synth", "audio-basis").standard_normal((k, config.audio_dim))
    audio_basis = (audio_basis / math.sqrt(k)).astype(np.float32)
    tokens = 1 + np.arange(k) * config.token_bins + _quantize(shared, config.token_bins)

    samples = []
    store = PayloadStore(info={
        "image_channels": n_blocks * k, "tile_hw": config.tile_hw, "audio_dim": config.audio_dim,
        "vocab_size": 1 + k * config.token_bins, "planted_dim": k, "mode": config.mode,
    })
    for i in range(n):
        sid = f"s{i:06d}"
        lon = float(lat_lon[i, 1])
        samples.append(GeoSample(
            id=sid, lat=float(lat_lon[i, 0]), lon=-180.0 if lon >= 180.0 else lon,
            month=int(months[i]), hour=int(hours[i]),
            audio_source=AUDIO_SOURCES[sources[i]], text_source=TEXT_SOURCES[text_src[i]],
            image_ref=f"img/{sid}", audio_ref=f"aud/{sid}", caption=tuple(int(t) for t in tokens[i]),
        ))
        if config.with_payloads:
            noise = derive_rng(seed, "synth", "noise", i)
            t = config.tile_hw
            img = image_latent[i][:, None, None] + config.image_noise * noise.standard_normal(
                (n_blocks * k, t, t), dtype=np.float32)
            store[f"img/{sid}"] = img
            store[f"aud/{sid}"] = shared[i] @ audio_basis + config.audio_noise * noise.standard_normal(
                config.audio_dim, dtype=np.float32)
    return samples, store


def _synth_locations(n: int, seed: int, config: SynthConfig) -> np.ndarray:
    rng = derive_rng(seed, "synth", "sites")
    n_sites = config.n_sites or max(1, n // 50)
    cells = set()
    while len(cells) < n_sites:
        cells.add((int(rng.integers(-60, 70)), int(rng.integers(-180, 180))))
    cells = sorted(cells)
    # heavy-tailed site popularity so cell counts span several density classes
    weights = rng.pareto(1.5, size=n_sites) + 1.0
    site = rng.choice(n_sites, size=n, p=weights / weights.sum())
    base = np.array(cells, dtype=float)[site]
    return base + rng.uniform(0.0, 1.0, size=(n, 2)) * 0.999


def grid_locations(rows: int, cols: int, bbox: tuple[float, float, float, float]) -> np.ndarray:
    """Row-major tile centers of a bbox (lat_min, lat_max, lon_min, lon_max); row 0 is north."""
    lat_min, lat_max, lon_min, lon_max = bbox
    lat_step = (lat_max - lat_min) / rows
    lon_step = (lon_max - lon_min) / cols
    out = np.zeros((rows * cols, 2))
    for r in range(rows):
        for c in range(cols):
            out[r * cols + c] = (lat_max - (r + 0.5) * lat_step, lon_min + (c + 0.5) * lon_step)
    return out
