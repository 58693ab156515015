"""Bit-exact JSON checkpoints.

Arrays are stored row-major as base64 of little-endian float64 (weights,
scaling) or raw 0/1 bytes (mask).  A sha256 over the decoded payloads
catches corruption.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from .net import Mask, Network

VERSION = 1


class CheckpointError(ValueError):
    pass


def _enc_f64(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _enc_mask(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=np.uint8).tobytes()).decode("ascii")


def _digest(chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _raw(b64: str) -> bytes:
    try:
        return base64.b64decode(b64.encode("ascii"), validate=True)
    except Exception as exc:
        raise CheckpointError(f"corrupted payload: {exc}") from None


def dumps(net: Network, mask: Mask | None = None, seed=None, config_digest=None) -> str:
    doc = {
        "version": VERSION,
        "dims": list(net.dims),
        "activation": "relu",
        "weights": [_enc_f64(w) for w in net.weights],
        "scaling": [_enc_f64(g) for g in net.scaling],
    }
    if mask is not None:
        doc["mask"] = [_enc_mask(k) for k in mask.keep]
    if seed is not None:
        doc["seed"] = seed
    if config_digest is not None:
        doc["config_digest"] = config_digest
    doc["checksum"] = _digest(_raw(s) for key in ("weights", "scaling", "mask") for s in doc.get(key, []))
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def loads(text: str):
    """Parse a checkpoint; returns ``(net, mask_or_None, meta)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("corrupted checkpoint: not an object")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    if doc.get("activation") != "relu":
        raise CheckpointError(f"unsupported activation {doc.get('activation')!r}")
    try:
        dims = [int(d) for d in doc["dims"]]
        wraw = [_raw(s) for s in doc["weights"]]
        graw = [_raw(s) for s in doc["scaling"]]
        mraw = [_raw(s) for s in doc["mask"]] if "mask" in doc else None
        checksum = doc["checksum"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupted checkpoint: missing field {exc}") from None
    if _digest(wraw + graw + (mraw or [])) != checksum:
        raise CheckpointError("corrupted payload: checksum mismatch")
    if len(wraw) != len(dims) - 1 or len(graw) != len(dims) - 2:
        raise CheckpointError(f"shape inconsistency: {len(wraw)} weight arrays for dims {dims}")
    shapes = list(zip(dims[:-1], dims[1:]))
    weights, scaling = [], []
    for j, (raw, shape) in enumerate(zip(wraw, shapes)):
        if len(raw) != 8 * shape[0] * shape[1]:
            raise CheckpointError(f"corrupted payload: layer {j + 1} has {len(raw)} bytes, expected shape {shape}")
        weights.append(np.frombuffer(raw, dtype="<f8").reshape(shape))
    for j, (raw, n) in enumerate(zip(graw, dims[1:-1])):
        if len(raw) != 8 * n:
            raise CheckpointError(f"corrupted payload: scaling {j + 1} has {len(raw)} bytes, expected {n} values")
        scaling.append(np.frombuffer(raw, dtype="<f8"))
    net = Network(tuple(weights), tuple(scaling))
    mask = None
    if mraw is not None:
        if len(mraw) != len(shapes):
            raise CheckpointError("shape inconsistency: mask layer count")
        keep = []
        for j, (raw, shape) in enumerate(zip(mraw, shapes)):
            a = np.frombuffer(raw, dtype=np.uint8)
            if a.size != shape[0] * shape[1] or np.any(a > 1):
                raise CheckpointError(f"corrupted payload: mask layer {j + 1}")
            keep.append(a.reshape(shape).astype(bool))
        mask = Mask(tuple(keep))
    meta = {k: doc[k] for k in ("seed", "config_digest") if k in doc}
    return net, mask, meta


def save_checkpoint(net: Network, mask: Mask | None, path, seed=None, config_digest=None) -> None:
    Path(path).write_text(dumps(net, mask, seed=seed, config_digest=config_digest))


def load_checkpoint(path):
    """Returns ``(net, mask_or_None)``."""
    net, mask, _ = loads(Path(path).read_text())
    return net, mask


def load_checkpoint_meta(path):
    return loads(Path(path).read_text())
