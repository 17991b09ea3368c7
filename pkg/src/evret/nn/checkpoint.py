"""Checkpoint I/O: one binary feature file per tensor plus a JSONL index."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from evret.corpus import read_features, write_features
from evret.errors import FormatError, IngestError
from evret.nn.params import ParameterSet


def _as_matrix(data: np.ndarray) -> np.ndarray:
    if data.ndim == 1:
        return data.reshape(1, -1)
    if data.ndim == 2:
        return data
    return data.reshape(-1, data.shape[-1])


def save_checkpoint(params: ParameterSet, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.jsonl"
    with open(index_path, "w", encoding="utf-8") as fh:
        for i, (name, t) in enumerate(params.items()):
            fname = f"t{i:04d}.evtf"
            write_features(_as_matrix(t.data), out_dir / fname)
            fh.write(json.dumps({"name": name, "shape": list(t.data.shape), "file": fname}) + "\n")
    return index_path


def load_checkpoint(params: ParameterSet, ckpt_dir) -> None:
    """Load tensors by name into an already-constructed ParameterSet."""
    ckpt_dir = Path(ckpt_dir)
    index_path = ckpt_dir / "index.jsonl"
    if not index_path.is_file():
        raise IngestError(index_path)
    state: dict[str, np.ndarray] = {}
    for line in index_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        data = read_features(ckpt_dir / entry["file"]).astype(np.float64)
        state[entry["name"]] = data.reshape(entry["shape"])
    missing = [name for name in params.names() if name not in state]
    if missing:
        raise FormatError("checkpoint tensors", params.names(), f"missing {missing}")
    params.load_state(state)
