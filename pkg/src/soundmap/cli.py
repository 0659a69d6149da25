"""Command-line entry point: ``soundmap <subcommand> [options] [key=value ...]``.

Each subcommand resolves a flat config from its defaults, an optional
``--config`` JSON file, ``key=value`` overrides and explicit flags (in that
order of precedence), rejects unknown keys, and writes everything it produces
under ``--out`` together with ``config.json`` and ``run_manifest.json``.

Exit codes: 0 success, 1 user or configuration error, 2 internal invariant
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("soundmap")

SUBCOMMANDS = ("synth", "split", "train", "eval", "map", "uncertainty", "gradcheck")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class UsageError(ValueError):
    pass


# -- config resolution -----------------------------------------------------------
def _defaults(cmd: str) -> dict:
    from dataclasses import asdict

    from .geodata import SplitConfig, SynthConfig
    from .model import ModelConfig
    from .training import DESK, TrainConfig

    if cmd == "synth":
        synth = asdict(SynthConfig())
        synth.pop("with_payloads")
        return {"n": 64, "planted_dim": 8, **synth, "grid_rows": 0, "grid_cols": 0,
                "bbox": [30.0, 40.0, -100.0, -90.0], "seed": 0}
    if cmd == "split":
        return {"manifest": None, **asdict(SplitConfig())}
    if cmd == "train":
        model = {f"model.{k}": v for k, v in ModelConfig().to_json().items()
                 if k not in ("image_channels", "audio_dim", "vocab_size")}
        train = {f"train.{k}": v for k, v in TrainConfig(**DESK).to_json().items() if k != "seed"}
        return {"manifest": None, "payloads": None, **model, **train, "seed": 0}
    if cmd == "eval":
        return {"checkpoint": None, "manifest": None, "payloads": None, "direction": "i2a", "zoom": 1,
                "use_text": False, "use_metadata": False}
    if cmd in ("map", "uncertainty"):
        base = {"checkpoint": None, "grid": None, "payloads": None, "zoom": 1, "use_metadata": True,
                "hours": [12], "month": 6, "audio_source": "freesound", "text_source": "model_caption",
                "colormap": "viridis", "cache_dir": None}
        if cmd == "map":
            base.update({"manifest": None, "query_id": None, "use_text": False})
        return base
    if cmd == "gradcheck":
        return {"coords_per_param": 4, "seed": 0}
    raise UsageError(f"unknown subcommand {cmd!r}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(cmd: str, config_path: str | None, overrides: list[str], flags: dict) -> dict:
    from .errors import ConfigError, ParseError

    cfg = _defaults(cmd)
    layers = []
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, config_path, e.lineno) from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        layers.append((config_path, data))
    kv = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        kv[k.strip()] = _parse_value(v)
    layers.append(("overrides", kv))
    layers.append(("flags", {k: v for k, v in flags.items() if v is not None}))
    for source, data in layers:
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown {cmd} config key(s) {unknown} from {source}")
        cfg.update(data)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    from .errors import ConfigError

    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


# -- run directory ---------------------------------------------------------------
class RunDir:
    def __init__(self, root: str | os.PathLike, cmd: str, cfg: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cmd = cmd
        self.cfg = cfg
        self.files: list[Path] = []
        self.write_json("config.json", cfg)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, p: str | os.PathLike) -> Path:
        p = Path(p)
        if p.is_dir():
            self.files.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        else:
            self.files.append(p)
        return p

    def write_json(self, rel: str, obj) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        return self.add(p)

    def write_csv(self, rel: str, header: list[str], rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        p = self.path(rel)
        p.write_text(buf.getvalue())
        return self.add(p)

    def finish(self) -> Path:
        entries = []
        for f in sorted(set(self.files)):
            data = f.read_bytes()
            entries.append({"path": str(f.relative_to(self.root)), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
        p = self.root / "run_manifest.json"
        p.write_text(json.dumps({"command": self.cmd, "files": entries}, indent=1, sort_keys=True) + "\n")
        return p


# -- subcommands -----------------------------------------------------------------
def cmd_synth(cfg: dict, run: RunDir) -> int:
    from .geodata import SynthConfig, grid_locations, save_manifest, synth_dataset
    from .mapping import TileGrid

    sc = SynthConfig(**{k: cfg[k] for k in ("tile_hw", "audio_dim", "token_bins", "image_noise",
                                            "audio_noise", "n_sites", "mode")})
    rows, cols = int(cfg["grid_rows"]), int(cfg["grid_cols"])
    locations = None
    n = int(cfg["n"])
    if rows or cols:
        locations = grid_locations(rows, cols, tuple(cfg["bbox"]))
        n = rows * cols
    samples, store = synth_dataset(n, int(cfg["planted_dim"]), int(cfg["seed"]), sc, locations=locations)
    save_manifest(run.path("manifest.jsonl"), samples)
    run.add(run.path("manifest.jsonl"))
    store.save(run.path("payloads"))
    run.add(run.path("payloads"))
    if locations is not None:
        run.write_json("grid.json", TileGrid.from_samples(samples, rows, cols, tuple(cfg["bbox"])).to_json())
    print(json.dumps({"n": len(samples), "out": str(run.root)}))
    return 0


def cmd_split(cfg: dict, run: RunDir) -> int:
    from .geodata import SPLITS, SplitConfig, assign_splits, audit_splits, load_manifest, save_manifest

    _require(cfg, "manifest")
    samples = load_manifest(cfg["manifest"])
    sc = SplitConfig(**{k: v for k, v in cfg.items() if k != "manifest"})
    split = assign_splits(samples, sc)
    by_id = {s.id: s for s in samples}
    for name in SPLITS:
        p = run.path(f"{name}.jsonl")
        save_manifest(p, [by_id[i] for i in split.ids(name)])
        run.add(p)
    p = run.path("excluded.jsonl")
    save_manifest(p, [by_id[i] for i in split.excluded])
    run.add(p)
    audit = audit_splits(samples, split, sc)
    run.write_json("audit.json", audit)
    run.write_csv("cells.csv", ["cell_lat", "cell_lon", "count", "density", "held_out", "pool"],
                  [(c.cell.cell_lat, c.cell.cell_lon, c.count, c.density, c.held_out, c.pool)
                   for c in split.cells])
    print(json.dumps(audit, sort_keys=True))
    return 0 if audit["shared_cells"] == 0 and audit["sub_threshold_violations"] == 0 else 2


def cmd_train(cfg: dict, run: RunDir) -> int:
    from .geodata import PayloadStore, load_manifest
    from .model import ModelConfig
    from .training import TrainConfig, fit

    _require(cfg, "manifest", "payloads")
    samples = load_manifest(cfg["manifest"])
    store = PayloadStore.load(cfg["payloads"])
    mc = ModelConfig.for_store(store.info, **{k[6:]: v for k, v in cfg.items() if k.startswith("model.")})
    tc = TrainConfig.from_json({**{k[6:]: v for k, v in cfg.items() if k.startswith("train.")},
                                "seed": int(cfg["seed"])})
    state, history = fit(samples, store, mc, tc, out_dir=run.root)
    run.add(run.root / "train_log.jsonl")
    run.add(run.root / "checkpoint")
    if history:
        from .plotting import plot_loss_curves

        keys = ["step", "lr", "total"] + [f"{k}_{p}" for k in ("match", "pseudo", "vib") for p in ("at", "ai", "it")]
        run.write_csv("loss.csv", keys, ([h[k] for k in keys] for h in history))
        run.add(plot_loss_curves(history, run.path("loss.png")))
    print(json.dumps({"steps": state.step, "final_loss": history[-1]["total"] if history else None,
                      "checkpoint": str(run.root / "checkpoint")}))
    return 0


def _report_table(rep) -> str:
    rows = [("direction", rep.direction), ("zoom", rep.zoom), ("use_text", rep.use_text),
            ("use_metadata", rep.use_metadata), ("R@10%", f"{rep.r_at_10pct:.4f}"), ("MdR", f"{rep.mdr:g}"),
            ("N", rep.n)]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def cmd_eval(cfg: dict, run: RunDir) -> int:
    from .geodata import PayloadStore, load_manifest
    from .plotting import plot_rank_histogram
    from .retrieval import EvalSettings, embed_samples, report_from_embeddings
    from .training import load_checkpoint

    _require(cfg, "checkpoint", "manifest", "payloads")
    state = load_checkpoint(cfg["checkpoint"])
    samples = load_manifest(cfg["manifest"])
    store = PayloadStore.load(cfg["payloads"])
    settings = EvalSettings(cfg["direction"], int(cfg["zoom"]), bool(cfg["use_text"]), bool(cfg["use_metadata"]))
    if not samples:
        from .errors import ConfigError

        raise ConfigError(f"{cfg['manifest']}: empty split")
    emb = embed_samples(state.model, samples, store, settings.zoom, settings.use_metadata)
    rep, ranks = report_from_embeddings(emb, settings)
    run.write_json("report.json", rep.to_json())
    run.write_csv("ranks.csv", ["query_id", "rank"], zip([s.id for s in samples], ranks.tolist()))
    run.add(plot_rank_histogram(ranks, rep.n, run.path("ranks.png"),
                                f"{rep.direction} zoom {rep.zoom}  R@10% {rep.r_at_10pct:.3f}"))
    print(json.dumps(rep.to_json(), sort_keys=True))
    print(_report_table(rep))
    return 0


def _meta_template(cfg: dict):
    from .fusion import Metadata
    from .geodata import AUDIO_SOURCES, TEXT_SOURCES
    from .errors import ConfigError

    if not cfg["use_metadata"]:
        return lambda hour: None
    if cfg["audio_source"] not in AUDIO_SOURCES:
        raise ConfigError(f"audio_source must be one of {AUDIO_SOURCES}")
    if cfg["text_source"] not in TEXT_SOURCES:
        raise ConfigError(f"text_source must be one of {TEXT_SOURCES}")
    return lambda hour: Metadata((0.0, 0.0), int(cfg["month"]), int(hour),
                                 AUDIO_SOURCES.index(cfg["audio_source"]),
                                 TEXT_SOURCES.index(cfg["text_source"]))


def _hours(cfg: dict) -> list[int]:
    hours = cfg["hours"]
    return [int(h) for h in (hours if isinstance(hours, list) else [hours])]


def _write_frames(run: RunDir, frames, hours, grid, colormap: str, stem: str) -> None:
    from .mapping import render_raster
    from .plotting import plot_raster

    rows = []
    for hour, r in zip(hours, frames):
        png = render_raster(r, run.path(f"{stem}_h{hour:02d}.png"), colormap)
        run.add(png)
        run.add(png.with_suffix(".json"))
        run.add(plot_raster(r, run.path(f"{stem}_h{hour:02d}_figure.png"), colormap, f"{stem} hour {hour}"))
        for k in range(len(grid)):
            i, j = divmod(k, grid.cols)
            rows.append((hour, i, j, f"{grid.centers[k, 0]:.6f}", f"{grid.centers[k, 1]:.6f}",
                         repr(float(r.raw[i, j])), repr(float(r.values[i, j]))))
    run.write_csv(f"{stem}.csv", ["hour", "row", "col", "lat", "lon", "raw", "normalized"], rows)


def _grid_embeddings(cfg: dict, state, store, grid, hour):
    from .mapping import precompute_grid_embeddings

    return precompute_grid_embeddings(state.model, grid, store, int(cfg["zoom"]), _meta_template(cfg)(hour),
                                      cfg["cache_dir"])


def cmd_map(cfg: dict, run: RunDir) -> int:
    from .encoders import pad_tokens
    from .errors import ConfigError
    from .geodata import PayloadStore, load_manifest
    from .mapping import TileGrid, normalize_frames, score_map
    from .numerics.autograd import no_grad
    from .retrieval import compose_query
    from .training import load_checkpoint

    _require(cfg, "checkpoint", "grid", "payloads", "manifest", "query_id")
    state = load_checkpoint(cfg["checkpoint"])
    grid = TileGrid.load(cfg["grid"])
    store = PayloadStore.load(cfg["payloads"])
    by_id = {s.id: s for s in load_manifest(cfg["manifest"])}
    if cfg["query_id"] not in by_id:
        raise ConfigError(f"query_id {cfg['query_id']!r} not in {cfg['manifest']}")
    q = by_id[cfg["query_id"]]
    import numpy as np

    with no_grad():
        query = state.model.embed_audio(store[q.audio_ref][None]).numpy()
        if cfg["use_text"]:
            query = compose_query(query, state.model.embed_text(pad_tokens([q.caption])).numpy())
    hours = _hours(cfg)
    frames = [score_map(query, _grid_embeddings(cfg, state, store, grid, h), grid) for h in hours]
    frames = normalize_frames(frames)
    _write_frames(run, frames, hours, grid, cfg["colormap"], "score")
    best = [int(np.argmax(f.raw)) for f in frames]
    summary = {"query_id": q.id, "hours": hours, "argmax_tile": best,
               "value_range": list(frames[0].value_range)}
    run.write_json("summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_uncertainty(cfg: dict, run: RunDir) -> int:
    from .geodata import PayloadStore
    from .mapping import TileGrid, normalize_frames, uncertainty_map
    from .training import load_checkpoint

    _require(cfg, "checkpoint", "grid", "payloads")
    state = load_checkpoint(cfg["checkpoint"])
    grid = TileGrid.load(cfg["grid"])
    store = PayloadStore.load(cfg["payloads"])
    hours = _hours(cfg)
    frames = normalize_frames([uncertainty_map(_grid_embeddings(cfg, state, store, grid, h), grid)
                               for h in hours])
    _write_frames(run, frames, hours, grid, cfg["colormap"], "uncertainty")
    summary = {"hours": hours, "value_range": list(frames[0].value_range)}
    run.write_json("summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_gradcheck(cfg: dict, run: RunDir) -> int:
    from .gradsuite import run_suite

    result = run_suite(int(cfg["seed"]), int(cfg["coords_per_param"]))
    run.write_json("gradcheck.json", result)
    run.write_csv("gradcheck.csv", ["module", "max_rel_error", "worst", "n_checked"],
                  [(m, repr(v["max_rel_error"]), v["worst"], v["n_checked"]) for m, v in result["modules"].items()])
    width = max(len(m) for m in result["modules"])
    for m, v in result["modules"].items():
        print(f"{m:<{width}}  {v['max_rel_error']:.3e}  ({v['worst']}, {v['n_checked']} checked)")
    print(f"{'worst':<{width}}  {result['max_rel_error']:.3e}  in {result['seconds']:.1f}s")
    return 0 if result["max_rel_error"] < 1e-4 else 2


HANDLERS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "map": cmd_map,
            "uncertainty": cmd_uncertainty, "gradcheck": cmd_gradcheck}

# flags that shadow config keys: (flag, key, kwargs)
FLAGS = {
    "synth": [("--n", "n", dict(type=int)), ("--planted-dim", "planted_dim", dict(type=int)),
              ("--mode", "mode", dict(choices=("planted", "source_subspace"))),
              ("--grid-rows", "grid_rows", dict(type=int)), ("--grid-cols", "grid_cols", dict(type=int))],
    "split": [("--manifest", "manifest", {})],
    "train": [("--manifest", "manifest", {}), ("--payloads", "payloads", {}),
              ("--steps", "train.steps", dict(type=int))],
    "eval": [("--checkpoint", "checkpoint", {}), ("--manifest", "manifest", {}), ("--payloads", "payloads", {}),
             ("--direction", "direction", dict(choices=("i2a", "a2i"))), ("--zoom", "zoom", dict(type=int)),
             ("--use-text", "use_text", dict(action="store_const", const=True)),
             ("--use-meta", "use_metadata", dict(action="store_const", const=True))],
    "map": [("--checkpoint", "checkpoint", {}), ("--grid", "grid", {}), ("--payloads", "payloads", {}),
            ("--manifest", "manifest", {}), ("--query-id", "query_id", {}), ("--zoom", "zoom", dict(type=int)),
            ("--use-text", "use_text", dict(action="store_const", const=True)),
            ("--no-meta", "use_metadata", dict(action="store_const", const=False)),
            ("--colormap", "colormap", {})],
    "uncertainty": [("--checkpoint", "checkpoint", {}), ("--grid", "grid", {}), ("--payloads", "payloads", {}),
                    ("--zoom", "zoom", dict(type=int)),
                    ("--no-meta", "use_metadata", dict(action="store_const", const=False)),
                    ("--colormap", "colormap", {})],
    "gradcheck": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soundmap", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="cmd", required=True)
    for cmd in SUBCOMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON file of settings")
        p.add_argument("--seed", type=int, default=None, help="single seed for every random stream")
        p.add_argument("--out", default=None, help=f"run directory (default runs/{cmd})")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS/numba worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, key, kw in FLAGS[cmd]:
            p.add_argument(flag, dest=f"flag:{key}", default=None, **kw)
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in THREAD_VARS:
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        log.warning("numpy already imported; --threads only affects libraries loaded later")


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _set_threads(args.threads)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    from .errors import ConfigError, ContractError, InputDomainError, ParseError

    try:
        flags = {k[5:]: v for k, v in vars(args).items() if k.startswith("flag:")}
        if args.seed is not None:
            if "seed" not in _defaults(args.cmd):
                flags["seed"] = None
                log.info("%s has no random streams; --seed ignored", args.cmd)
            else:
                flags["seed"] = args.seed
        cfg = resolve_config(args.cmd, args.config, args.overrides, flags)
        if args.dry_run:
            print(json.dumps(cfg, indent=1, sort_keys=True))
            return 0
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        rundir = RunDir(args.out or os.path.join("runs", args.cmd), args.cmd, cfg)
        code = HANDLERS[args.cmd](cfg, rundir)
        rundir.finish()
        return code
    except ContractError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, InputDomainError, ParseError, UsageError, FileNotFoundError, KeyError,
            PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
