"""Checkpoint directories: manifest.json plus one flat parameter file.

The manifest fixes the architecture, the parameter order (name + shape),
and the normalization stats; params.f32 holds every tensor back to back as
little-endian 32-bit floats in manifest order.  Loading rebuilds the model
from the stored architecture and copies values in, so a save/load round
trip reproduces forward passes bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError
from .models import Fvcn, NormStats, ScoreNet

CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(out_dir: str | Path, model, norm: NormStats,
                    extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = model.params()
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": model.arch,
        "params": [
            {"name": p.name, "shape": list(p.value.shape)} for p in params
        ],
        "optimizer_state": False,
        "norm": norm.to_json_dict(),
    }
    if extra:
        manifest["extra"] = extra
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    flat = np.concatenate([p.value.astype("<f4").ravel() for p in params])
    flat.tofile(out / "params.f32")


def load_checkpoint(in_dir: str | Path):
    """Rebuild (model, norm_stats) from a checkpoint directory."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    arch = manifest["arch"]
    kind = arch.get("kind")
    if kind == "score":
        model = ScoreNet(arch)
    elif kind == "fvcn":
        model = Fvcn(arch)
    else:
        raise ContractError(f"unknown checkpoint kind {kind!r}")
    params = model.params()
    entries = manifest["params"]
    if [p.name for p in params] != [e["name"] for e in entries]:
        raise ContractError("checkpoint parameter names do not match the model")
    flat = np.fromfile(src / "params.f32", dtype="<f4")
    total = sum(int(np.prod(e["shape"])) for e in entries)
    if flat.size != total:
        raise ContractError(
            f"params.f32 holds {flat.size} values, manifest expects {total}"
        )
    offset = 0
    for p, e in zip(params, entries):
        shape = tuple(e["shape"])
        if p.value.shape != shape:
            raise ContractError(f"shape mismatch for {p.name}")
        n = int(np.prod(shape))
        p.value[...] = flat[offset : offset + n].reshape(shape)
        offset += n
    norm = NormStats.from_json_dict(manifest["norm"])
    return model, norm
