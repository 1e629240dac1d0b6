"""Flat binary checkpoint format.

Layout:

    8-byte magic  b"ADTRIM1\\n"
    8-byte little-endian uint64: header length in bytes
    header: UTF-8 JSON with sorted keys:
        {"config": <full run config dict>, "tensors": [{"name", "shape"}...],
         "version": "..."}
    raw data: each tensor's float64 little-endian bytes, row-major,
        concatenated in the header's (sorted-by-name) order

Writing is a pure function of (params, config), so identical training runs
produce byte-identical files; loading round-trips bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import TOOL_VERSION, RunConfig, config_from_dict, config_to_dict
from .rng import RngStream

MAGIC = b"ADTRIM1\n"


def save_checkpoint(path, params: dict, run_cfg: RunConfig) -> None:
    names = sorted(params)
    header = {
        "version": TOOL_VERSION,
        "config": config_to_dict(run_cfg),
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, RunConfig]:
    """Returns ({name: float64 ndarray}, RunConfig)."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(MAGIC)
    hlen = int.from_bytes(raw[off:off + 8], "little")
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, initial=1))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float64)
        off += count * 8
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes ({len(raw) - off})")
    return arrays, config_from_dict(header["config"])


def load_model(path):
    """Rebuild an AdaptiveModel from a checkpoint; bit-exact parameters."""
    from .runtime import AdaptiveModel

    arrays, run_cfg = load_checkpoint(path)
    model = AdaptiveModel(run_cfg.model, RngStream(run_cfg.train.seed).child("init"))
    params = model.params()
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise ValueError(f"{path}: parameter mismatch; missing={missing}, unexpected={unexpected}")
    for name, tensor in params.items():
        if arrays[name].shape != tensor.data.shape:
            raise ValueError(
                f"{path}: shape mismatch for {name}: "
                f"{arrays[name].shape} vs {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
    return model, run_cfg


def config_diff(stored: RunConfig, given: RunConfig) -> list[str]:
    """Per-key differences between two run configs (flat key space)."""
    a, b = stored.flat(), given.flat()
    return [f"{k}: checkpoint={a[k]!r} config={b[k]!r}" for k in sorted(a) if a[k] != b[k]]
