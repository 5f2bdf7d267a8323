"""Flat checkpoint container: one JSON header line, then raw float32 payload.

Layout:
    <compact JSON header>\n<little-endian float32 tensor payload>

The header records layer_id, shape, dtype, and byte offset (relative to the
start of the payload) for every tensor, plus an optional "meta" object used
by gene files and cluster snapshots. Payloads are always 32-bit reals; this
is the wire dtype the communication ledger accounts for.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import LayeredParams

_FORMAT = "layered-params"
_VERSION = 1


def save_params(path, params: LayeredParams, meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for layer_id, tensor in params.items():
        data = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
        entries.append(
            {
                "layer_id": layer_id,
                "shape": list(tensor.shape),
                "dtype": "float32",
                "offset": offset,
            }
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "layers": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(blob)
        f.write(b"\n")
        f.write(b"".join(chunks))


def load_params(path) -> tuple[LayeredParams, dict]:
    """Read a container, returning the tensors and the header meta object."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed header: {e}") from e
    if header.get("format") != _FORMAT:
        raise ValueError(f"{path}: not a {_FORMAT} container")
    payload = raw[newline + 1 :]
    layers = []
    for entry in header["layers"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise ValueError(f"{path}: payload truncated at layer '{entry['layer_id']}'")
        tensor = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        layers.append((entry["layer_id"], tensor.astype(np.float32)))
    return LayeredParams(layers, copy=False), header.get("meta", {})
