from __future__ import annotations

import json

import numpy as np
import pytest

from genefl.checkpoint import load_params, save_params
from genefl.params import Architecture, init_params


def test_round_trip_preserves_values_and_order(tmp_path):
    model = init_params(Architecture((4, 6, 3)), 0)
    path = tmp_path / "model.ckpt"
    save_params(path, model, meta={"kind": "client", "client_id": 3})
    loaded, meta = load_params(path)
    assert loaded.layer_ids == model.layer_ids
    assert loaded.equals_exact(model)
    assert meta == {"kind": "client", "client_id": 3}


def test_header_is_one_json_line_with_offsets(tmp_path):
    model = init_params(Architecture((2, 3, 2)), 1)
    path = tmp_path / "model.ckpt"
    save_params(path, model)
    raw = path.read_bytes()
    header = json.loads(raw[: raw.index(b"\n")].decode("utf-8"))
    assert header["format"] == "layered-params"
    offsets = [e["offset"] for e in header["layers"]]
    sizes = [4 * int(np.prod(e["shape"])) for e in header["layers"]]
    assert offsets == [sum(sizes[:i]) for i in range(len(sizes))]
    assert all(e["dtype"] == "float32" for e in header["layers"])
    payload = raw[raw.index(b"\n") + 1 :]
    assert len(payload) == sum(sizes)


def test_float64_input_is_stored_as_float32(tmp_path):
    model = init_params(Architecture((3, 2)), 2, dtype=np.float64)
    path = tmp_path / "model.ckpt"
    save_params(path, model)
    loaded, _ = load_params(path)
    assert loaded.dtype == np.float32
    assert loaded.allclose(model.astype(np.float32))


def test_payload_is_little_endian(tmp_path):
    from genefl.params import LayeredParams

    path = tmp_path / "one.ckpt"
    save_params(path, LayeredParams([("w", np.array([1.0], dtype=np.float32))]))
    raw = path.read_bytes()
    payload = raw[raw.index(b"\n") + 1 :]
    assert payload == np.array([1.0], dtype="<f4").tobytes()


def test_truncated_payload_rejected(tmp_path):
    model = init_params(Architecture((4, 4)), 3)
    path = tmp_path / "model.ckpt"
    save_params(path, model)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_params(tmp_path / "cut.ckpt")


def test_non_container_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        load_params(path)
