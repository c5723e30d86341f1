"""Single-file checkpoint format.

Layout::

    b"NNCKPT01"                      8-byte magic
    uint32 little-endian             metadata length N
    N bytes UTF-8 JSON               metadata, including the tensor manifest
    payload                          raw little-endian float32 tensors

Manifest entries are ``{name, kind, dtype, shape, offset, length}`` with
``offset`` relative to the start of the payload and ``kind`` one of
``param``, ``buffer`` or ``mask``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .prune import LayerMask, MaskSet
from .zoo import ModelGraph, ModelSpec, build_model

MAGIC = b"NNCKPT01"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def save_checkpoint(model: ModelGraph, path, metadata: dict | None = None, masks: MaskSet | None = None) -> None:
    metadata = dict(metadata or {})
    entries, blobs, offset = [], [], 0

    def add(name, kind, array):
        nonlocal offset
        arr = np.ascontiguousarray(array, dtype=_DTYPE)
        raw = arr.tobytes()
        entries.append({"name": name, "kind": kind, "dtype": "float32", "shape": list(arr.shape),
                        "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_parameters():
        add(name, "param", p.data)
    for name, buf in model.named_buffers():
        add(name, "buffer", buf)
    if masks:
        for name, lm in masks.items():
            add(name, "mask", lm.mask)
        metadata["prune"] = {
            **metadata.get("prune", {}),
            "thresholds": {name: lm.threshold for name, lm in masks.items()},
        }
    metadata.update({
        "format_version": FORMAT_VERSION,
        "arch": model.spec.arch,
        "spec": model.spec.to_dict(),
        "tensors": entries,
    })
    header = json.dumps(metadata, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Parse and validate a checkpoint; returns (metadata, tensors, masks)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (n,) = struct.unpack("<I", blob[8:12])
    if 12 + n > len(blob):
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(blob[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    payload = memoryview(blob)[12 + n :]
    tensors, masks = {}, {}
    spans = []
    for e in meta.get("tensors", []):
        try:
            name, kind, shape = e["name"], e["kind"], tuple(e["shape"])
            off, length = int(e["offset"]), int(e["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed manifest entry {e!r}") from exc
        if e.get("dtype") != "float32" or length != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{path}: manifest entry {name} has inconsistent dtype/length")
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"{path}: tensor {name} lies outside the payload (truncated file?)")
        spans.append((off, off + length, name))
        arr = np.frombuffer(payload[off : off + length], dtype=_DTYPE).reshape(shape).astype(np.float32)
        (masks if kind == "mask" else tensors)[name] = arr
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError(f"{path}: tensors {a} and {b} overlap")
    return meta, tensors, masks


def load_checkpoint(path, with_masks: bool = False):
    """Rebuild the model described by a checkpoint and load its tensors bit-exactly."""
    meta, tensors, mask_arrays = read_checkpoint(path)
    try:
        spec = ModelSpec(**meta["spec"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model spec in metadata: {exc}") from exc
    model = build_model(spec, seed=int(meta.get("seed", 0)))
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: manifest does not match {spec.arch}: {exc}") from exc
    model.eval()
    if not with_masks:
        return model, meta
    thresholds = meta.get("prune", {}).get("thresholds", {})
    masks = {name: LayerMask(m, float(thresholds.get(name, float("nan")))) for name, m in mask_arrays.items()}
    return model, meta, masks
