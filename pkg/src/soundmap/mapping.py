"""Score and uncertainty rasters over tile grids.

Tiles are embedded once per (model, zoom, metadata) and cached. A query
embedding is then scored against every tile by negative CSD. Frames of a
dynamic map share one min-max range so colors compare across time.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import GaussianEmbedding, eval_view
from .errors import ContractError, InputDomainError, ParseError
from .fusion import Metadata, MetadataBatch
from .geodata import GeoSample, PayloadStore, grid_locations
from .numerics.autograd import no_grad
from .probloss import csd_matrix_np

KINDS = ("similarity", "uncertainty")
COLORMAPS = ("gray", "viridis", "magma", "inferno", "plasma", "cividis")


@dataclass(frozen=True)
class TileGrid:
    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max
    rows: int
    cols: int
    refs: tuple[str, ...]
    centers: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        object.__setattr__(self, "refs", tuple(self.refs))
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise InputDomainError(f"degenerate bbox {self.bbox}")
        if self.rows < 0 or self.cols < 0 or len(self.refs) != self.rows * self.cols:
            raise InputDomainError(f"{len(self.refs)} refs for a {self.rows}x{self.cols} grid")
        centers = self.centers
        if centers is None:
            centers = grid_locations(self.rows, self.cols, self.bbox) if self.refs else np.zeros((0, 2))
        centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        if len(centers) != len(self.refs):
            raise InputDomainError(f"{len(centers)} centers for {len(self.refs)} tiles")
        inside = ((centers[:, 0] > lat_min) & (centers[:, 0] < lat_max)
                  & (centers[:, 1] > lon_min) & (centers[:, 1] < lon_max))
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise InputDomainError(f"tile {bad} center {tuple(centers[bad])} not strictly inside bbox")
        object.__setattr__(self, "centers", centers)

    def __len__(self) -> int:
        return len(self.refs)

    @classmethod
    def from_samples(cls, samples: list[GeoSample], rows: int, cols: int,
                     bbox: tuple[float, float, float, float]) -> "TileGrid":
        """Grid whose tile k is ``samples[k]``'s image, centered at that sample's location."""
        return cls(bbox, rows, cols, tuple(s.image_ref for s in samples),
                   np.array([(s.lat, s.lon) for s in samples], dtype=float).reshape(-1, 2))

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "rows": self.rows, "cols": self.cols,
                "refs": list(self.refs), "centers": self.centers.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "TileGrid":
        missing = {"bbox", "rows", "cols", "refs"} - set(data)
        if missing:
            raise InputDomainError(f"grid manifest missing {sorted(missing)}")
        return cls(data["bbox"], int(data["rows"]), int(data["cols"]), data["refs"], data.get("centers"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TileGrid":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(str(e), str(path), e.lineno) from None
        return cls.from_json(data)


@dataclass
class ScoreRaster:
    values: np.ndarray  # (rows, cols)
    bbox: tuple[float, float, float, float]
    kind: str
    value_range: tuple[float, float] | None = None  # set once normalized
    raw: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ContractError(f"raster values must be 2-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ContractError("raster holds non-finite values")
        if self.raw is None:
            self.raw = self.values.copy()

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def normalized(self) -> bool:
        return self.value_range is not None

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "kind": self.kind,
                "value_range": None if self.value_range is None else list(self.value_range),
                "shape": list(self.shape), "values": self.values.tolist(), "raw": self.raw.tolist()}


# -- embeddings --------------------------------------------------------------------
def _atomic_save(path: Path, arrays: dict[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cache_key(model_hash: str, grid: TileGrid, zoom: int, meta: Metadata | None) -> str:
    payload = {"model": model_hash, "zoom": int(zoom),
               "meta": None if meta is None else meta.to_json(),
               "refs": list(grid.refs), "centers": grid.centers.tolist()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def precompute_grid_embeddings(model, grid: TileGrid, store: PayloadStore, zoom: int,
                               meta: Metadata | None = None, cache_dir: str | os.PathLike | None = None,
                               batch_size: int = 128) -> GaussianEmbedding:
    """Fused image embeddings for every tile, stacked in row-major grid order.

    ``meta`` is a template: each tile's location replaces ``meta.latlon`` so
    only the time and source fields are shared. ``None`` means no metadata.
    """
    d = model.config.d
    if len(grid) == 0:
        return GaussianEmbedding(np.zeros((0, d), np.float32), np.zeros((0, d), np.float32))
    for k, ref in enumerate(grid.refs):
        if ref not in store:
            raise InputDomainError(f"tile {k}: payload {ref!r} missing from store")
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cache_key(model.content_hash(), grid, zoom, meta)}.npz"
        if path.exists():
            with np.load(path) as z:
                return GaussianEmbedding(z["mu"], z["log_var"])
    cfg = model.config
    mus, lvs = [], []
    with no_grad():
        for start in range(0, len(grid), batch_size):
            stop = min(start + batch_size, len(grid))
            images = np.stack([eval_view(store[grid.refs[k]], zoom, cfg.zoom_hw, cfg.input_hw)
                               for k in range(start, stop)])
            if meta is None:
                batch = None
            else:
                batch = MetadataBatch.stack([
                    Metadata(tuple(grid.centers[k]), meta.month, meta.hour, meta.audio_source,
                             meta.text_source, meta.present_mask)
                    for k in range(start, stop)])
            z = model.embed_image(images, np.full(stop - start, zoom), batch).numpy()
            mus.append(z.mu)
            lvs.append(z.log_var)
    emb = GaussianEmbedding(np.concatenate(mus), np.concatenate(lvs))
    if path is not None:
        _atomic_save(path, {"mu": emb.mu, "log_var": emb.log_var})
    return emb


def _grid_shape(grid, n: int) -> tuple[tuple[int, int], tuple]:
    if isinstance(grid, TileGrid):
        shape, bbox = (grid.rows, grid.cols), grid.bbox
    else:
        shape, bbox = tuple(grid), (0.0, 1.0, 0.0, 1.0)
    if shape[0] * shape[1] != n:
        raise ContractError(f"{n} tile embeddings do not fill a {shape[0]}x{shape[1]} grid")
    return shape, bbox


def score_map(query: GaussianEmbedding, grid_embeddings: GaussianEmbedding, grid) -> ScoreRaster:
    """Per-tile score ``-csd(query, tile)``; ``grid`` is a TileGrid or a (rows, cols) pair."""
    g = grid_embeddings.numpy()
    q = query.numpy()
    shape, bbox = _grid_shape(grid, len(g.mu))
    if len(g.mu) == 0:
        return ScoreRaster(np.zeros(shape), bbox, "similarity")
    D = csd_matrix_np(GaussianEmbedding(np.atleast_2d(q.mu), np.atleast_2d(q.log_var)), g)[0]
    return ScoreRaster(-D.reshape(shape), bbox, "similarity")


def uncertainty_map(grid_embeddings: GaussianEmbedding, grid) -> ScoreRaster:
    """Per-tile ``||sigma||_1 = sum_j sqrt(exp(log_var_j))``."""
    lv = np.asarray(grid_embeddings.numpy().log_var, dtype=np.float64)
    shape, bbox = _grid_shape(grid, len(lv))
    return ScoreRaster(np.sqrt(np.exp(lv)).sum(axis=-1).reshape(shape), bbox, "uncertainty")


def normalize_frames(rasters: list[ScoreRaster]) -> list[ScoreRaster]:
    """Min-max to [0, 1] with one range over all frames; a constant range maps to 0.5."""
    if not rasters:
        return []
    shape, kind = rasters[0].shape, rasters[0].kind
    for k, r in enumerate(rasters):
        if r.shape != shape:
            raise ContractError(f"frame {k} has shape {r.shape}, frame 0 has {shape}")
        if r.kind != kind:
            raise ContractError(f"frame {k} is {r.kind!r}, frame 0 is {kind!r}")
    if shape[0] * shape[1] == 0:
        return [ScoreRaster(r.values.copy(), r.bbox, kind, (0.0, 0.0), r.raw) for r in rasters]
    lo = min(float(r.values.min()) for r in rasters)
    hi = max(float(r.values.max()) for r in rasters)
    out = []
    for r in rasters:
        if hi > lo:
            v = (r.values - lo) / (hi - lo)
        else:
            v = np.full(shape, 0.5)
        out.append(ScoreRaster(np.clip(v, 0.0, 1.0), r.bbox, kind, (lo, hi), r.raw))
    return out


def quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(values, dtype=float), 0.0, 1.0) * 255).astype(np.uint8)


def render_raster(raster: ScoreRaster, path: str | os.PathLike, colormap: str = "gray") -> Path:
    """8-bit PNG plus a ``.json`` sidecar; palette PNG for color maps so the index channel is kept."""
    from PIL import Image

    if colormap not in COLORMAPS:
        raise ContractError(f"colormap must be one of {COLORMAPS}, got {colormap!r}")
    if not raster.normalized:
        raise ContractError("render_raster needs a normalized raster (see normalize_frames)")
    path = Path(path)
    idx = quantize(raster.values)
    if colormap == "gray":
        img = Image.fromarray(idx, mode="L")
    else:
        from matplotlib import colormaps

        lut = (colormaps[colormap](np.arange(256) / 255.0)[:, :3] * 255).round().astype(np.uint8)
        img = Image.fromarray(idx, mode="P")
        img.putpalette(lut.reshape(-1).tolist())
    img.save(path, format="PNG")
    sidecar = {"bbox": list(raster.bbox), "value_range": list(raster.value_range),
               "kind": raster.kind, "colormap": colormap}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return path


def read_index_channel(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img).copy()


__all__ = [
    "ScoreRaster",
    "TileGrid",
    "cache_key",
    "normalize_frames",
    "precompute_grid_embeddings",
    "quantize",
    "read_index_channel",
    "render_raster",
    "score_map",
    "uncertainty_map",
]
