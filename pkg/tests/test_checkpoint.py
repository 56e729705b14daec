import json
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mutations import header_mutations, join_blob, load_blob, split_blob
from ssmprune.checkpoint import (
    dims_to_metadata, encode_header, parse_tensors, read_checkpoint, read_tensors, write_checkpoint, write_tensors,
)
from ssmprune.errors import CheckpointError
from ssmprune.model import PRESETS
from ssmprune.pruning import LayerPlan, PrunePlan, apply_plan
from ssmprune.tensor import Tensor
from ssmprune.toy import random_model

DESK = PRESETS["desk"]


def _models():
    toy = random_model(PRESETS["toy"], seed=1)
    uneven = apply_plan(toy, PrunePlan("t", [LayerPlan(keep_heads=[0, 2]), LayerPlan()]))
    return {
        "desk": random_model(DESK, seed=0),
        "mha_mlp": random_model(replace(PRESETS["tiny"], n_groups=2, has_mlp=True, d_mlp=3, out_bias=True), seed=2),
        "uneven": uneven,
    }


@pytest.mark.parametrize("name", ["desk", "mha_mlp", "uneven"])
def test_round_trip_byte_stable(tmp_path, name):
    m = _models()[name]
    a, b = tmp_path / "a.st", tmp_path / "b.st"
    write_checkpoint(a, m)
    back = read_checkpoint(a)
    write_checkpoint(b, back)
    assert a.read_bytes() == b.read_bytes()
    assert back.dims == m.dims
    for k, v in m.params.named_tensors().items():
        assert np.array_equal(v.data, back.params.named_tensors()[k].data)


def test_layout(tmp_path):
    m = random_model(DESK)
    p = tmp_path / "m.st"
    write_checkpoint(p, m)
    blob = p.read_bytes()
    (n,) = struct.unpack("<Q", blob[:8])
    text = blob[8 : 8 + n].decode()
    header = json.loads(text)
    assert text == json.dumps(header, sort_keys=True, separators=(",", ":"))
    assert header["layers.0.in_proj.weight"]["shape"] == [4, 22]
    spans = sorted(v["data_offsets"] for k, v in header.items() if k != "__metadata__")
    assert spans[0][0] == 0 and spans[-1][1] == len(blob) - 8 - n
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    write_checkpoint(tmp_path / "again.st", m)
    assert (tmp_path / "again.st").read_bytes() == blob


def test_payload_is_little_endian_f32(tmp_path):
    p = tmp_path / "t.st"
    write_tensors(p, {"a": Tensor([1.5, -2.0])})
    assert p.read_bytes()[-8:] == struct.pack("<2f", 1.5, -2.0)


def test_overlap_error_message(tmp_path):
    p = tmp_path / "t.st"
    write_tensors(p, {"a": Tensor([1.0, 2.0]), "b": Tensor([3.0, 4.0])})
    header, payload = split_blob(p.read_bytes())
    header["b"]["data_offsets"] = [4, 12]
    header["a"]["data_offsets"] = [0, 8]
    with pytest.raises(CheckpointError, match="overlapping data_offsets"):
        parse_tensors(join_blob(header, payload + b"\0" * 4))


@pytest.mark.parametrize(
    "blob,msg",
    [(b"\x01", "too short"), (struct.pack("<Q", 99) + b"{}", "exceeds"), (struct.pack("<Q", 2) + b"{x", "malformed")],
)
def test_malformed_files(blob, msg):
    with pytest.raises(CheckpointError, match=msg):
        parse_tensors(blob)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        read_tensors(tmp_path / "nope.st")


@pytest.mark.parametrize("name", ["desk", "mha_mlp", "uneven"])
def test_every_header_mutation_rejected(tmp_path, name):
    p = tmp_path / "m.st"
    write_checkpoint(p, _models()[name])
    header, payload = split_blob(p.read_bytes())
    muts = header_mutations(header)
    assert len(muts) > 100
    accepted = []
    for label, h in muts:
        try:
            load_blob(join_blob(h, payload))
            accepted.append(label)
        except CheckpointError:
            pass
    assert accepted == []


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_fuzz_header_bytes(data):
    """Arbitrary single-byte header edits either fail cleanly or leave a consistent model."""
    m = random_model(DESK, seed=3)
    tensors = m.params.named_tensors()
    header, offset = {}, 0
    for k in sorted(tensors):
        nb = 4 * tensors[k].size
        header[k] = {"dtype": "F32", "shape": list(tensors[k].shape), "data_offsets": [offset, offset + nb]}
        offset += nb
    header["__metadata__"] = dims_to_metadata(m.dims)
    h = encode_header(header)
    payload = b"".join(np.ascontiguousarray(tensors[k].data, dtype="<f4").tobytes() for k in sorted(tensors))
    pos = data.draw(st.integers(0, len(h) - 1))
    byte = data.draw(st.integers(0, 255))
    mutated = bytearray(h)
    mutated[pos] = byte
    blob = struct.pack("<Q", len(mutated)) + bytes(mutated) + payload
    try:
        back = load_blob(blob)
    except CheckpointError:
        return
    # survivors must still describe a self-consistent model of the same shape
    assert back.n_params() == m.n_params()


def test_pruned_model_round_trips(tmp_path):
    m = _models()["uneven"]
    p = tmp_path / "p.st"
    write_checkpoint(p, m)
    back = read_checkpoint(p)
    assert back.dims.head_counts == (2, 4)
    assert dims_to_metadata(back.dims)["head_counts"] == "2,4"
