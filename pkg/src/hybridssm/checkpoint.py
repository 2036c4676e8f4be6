"""Checkpoints: ``<prefix>.json`` manifest plus ``<prefix>.bin`` holding every array little-endian, in manifest order."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "hybridssm-arrays-v1"


def save_arrays(prefix: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> dict:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a)
        le = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    bin_path = prefix.with_suffix(".bin")
    bin_path.write_bytes(blob)
    manifest = {"format": FORMAT, "binary": bin_path.name, "sha256": hashlib.sha256(blob).hexdigest(),
                "arrays": entries, **(dict(meta) if meta else {})}
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_arrays(prefix: str | Path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unrecognised checkpoint format {manifest.get('format')!r}")
    blob = (prefix.parent / manifest["binary"]).read_bytes()
    if verify and hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError("checkpoint binary does not match its manifest checksum")
    arrays = {}
    for e in manifest["arrays"]:
        a = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(a.dtype.newbyteorder("="))
    return arrays, manifest


def save_model(prefix: str | Path, model, mults=None) -> dict:
    """Model-only checkpoint: config, multipliers and parameters."""
    meta = {"kind": "model", "config": model.config.to_dict(), "precision": model.config.precision,
            "seed": model.config.seed}
    if mults is not None:
        meta["mults"] = mults.to_dict()
    return save_arrays(prefix, model.arrays(), meta)


def load_model(prefix: str | Path):
    from .blocks import HybridConfig, init_model
    from .mup import MuPMultiplierSet

    arrays, manifest = load_arrays(prefix)
    config = HybridConfig.from_dict(manifest["config"])
    base = MuPMultiplierSet.from_dict(manifest["mults"]) if "mults" in manifest else None
    model, mults = init_model(config, base)
    model.load_arrays(arrays)
    return model, mults
