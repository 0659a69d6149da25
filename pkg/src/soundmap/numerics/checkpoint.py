"""Checkpoint directories: a JSON header plus one raw little-endian file per array."""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

HEADER = "header.json"


def _fname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_arrays(directory: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` and ``meta`` under ``directory``; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    used: set[str] = set()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        fname = _fname(name)
        if fname in used:
            raise ValueError(f"file name collision for {name!r}")
        used.add(fname)
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        entries[name] = {"shape": list(arr.shape), "dtype": dtype.str, "file": fname}
    header = {"tensors": entries, "meta": meta or {}}
    path = directory / HEADER
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(header, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_arrays(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    header = json.loads((directory / HEADER).read_text())
    arrays = {}
    for name, entry in header["tensors"].items():
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header.get("meta", {})
