"""Single-file safetensors-compatible checkpoints.

File layout::

    u64 little-endian  header length n
    n bytes            JSON header, keys sorted, no whitespace
    payload            little-endian fp32 tensors, back to back

The header maps each tensor name to ``{"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]}`` (offsets relative to the payload start) and
carries ``__metadata__``, a string-to-string map holding the model dims.
"""
from __future__ import annotations

import json
import math
import os
import struct
from typing import Optional

import numpy as np

from .errors import CheckpointError, DimensionError
from .model import Model, ModelDims, ModelParams, block_from_tensors, expected_shapes
from .tensor import Tensor

FORMAT_TAG = "ssmprune/1"

_INT_FIELDS = ("d_model", "n_layers", "n_heads", "head_dim", "d_state", "n_groups", "d_conv", "vocab_size", "d_mlp", "norm_div")
_BOOL_FIELDS = ("has_mlp", "out_bias")


def encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def write_tensors(path, tensors: dict[str, Tensor], metadata: Optional[dict[str, str]] = None) -> None:
    """Write named fp32 tensors in name order; the file is replaced atomically."""
    header: dict = {}
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        nbytes = 4 * t.size
        header[name] = {"dtype": "F32", "shape": list(t.shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    hbytes = encode_header(header)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for name in sorted(tensors):
            f.write(np.ascontiguousarray(tensors[name].data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_tensors(path) -> tuple[dict[str, Tensor], dict[str, str]]:
    """Parse and validate a container; returns ``(tensors, metadata)``."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return parse_tensors(blob)


def parse_tensors(blob: bytes) -> tuple[dict[str, Tensor], dict[str, str]]:
    if len(blob) < 8:
        raise CheckpointError("file too short for header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > len(blob) - 8:
        raise CheckpointError(f"header length {n} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed header JSON: {e}") from e
    if not isinstance(header, dict):
        raise CheckpointError("malformed header JSON: top level is not an object")
    payload = memoryview(blob)[8 + n :]

    meta = header.pop("__metadata__", {})
    if not isinstance(meta, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
        raise CheckpointError("__metadata__ must map strings to strings")

    spans = []
    for name, rec in header.items():
        if not isinstance(rec, dict) or set(rec) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointError(f"{name}: record must have exactly dtype, shape, data_offsets")
        if rec["dtype"] != "F32":
            raise CheckpointError(f"{name}: unsupported dtype {rec['dtype']!r} (only F32)")
        shape, offs = rec["shape"], rec["data_offsets"]
        if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
            raise CheckpointError(f"{name}: bad shape {shape!r}")
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offs)
            or not 0 <= offs[0] <= offs[1]
        ):
            raise CheckpointError(f"{name}: bad data_offsets {offs!r}")
        if offs[1] - offs[0] != 4 * math.prod(shape):
            raise CheckpointError(f"{name}: data_offsets span {offs[1] - offs[0]} bytes, shape {shape} needs {4 * math.prod(shape)}")
        spans.append((offs[0], offs[1], name))
    spans.sort()
    pos = 0
    for begin, end, name in spans:
        if begin < pos:
            raise CheckpointError(f"overlapping data_offsets at {name}")
        if begin > pos:
            raise CheckpointError(f"gap in data region before {name}")
        pos = end
    if pos != len(payload):
        raise CheckpointError(f"data region is {len(payload)} bytes but offsets cover {pos}")

    tensors = {}
    for begin, end, name in spans:
        arr = np.frombuffer(payload[begin:end], dtype="<f4").reshape(header[name]["shape"])
        try:
            tensors[name] = Tensor(arr)
        except Exception as e:
            raise CheckpointError(f"{name}: {e}") from e
    return tensors, meta


# --------------------------------------------------------------------------
# model <-> metadata
# --------------------------------------------------------------------------


def dims_to_metadata(dims: ModelDims) -> dict[str, str]:
    meta = {"format": FORMAT_TAG, "head_pattern": dims.head_pattern, "norm_eps": repr(float(dims.norm_eps))}
    for k in _INT_FIELDS:
        meta[k] = str(int(getattr(dims, k)))
    for k in _BOOL_FIELDS:
        meta[k] = "1" if getattr(dims, k) else "0"
    if dims.head_counts:
        meta["head_counts"] = ",".join(str(h) for h in dims.head_counts)
        meta["group_counts"] = ",".join(str(g) for g in dims.group_counts)
    return meta


def _parse_int(meta, key) -> int:
    v = meta.get(key)
    if v is None:
        raise CheckpointError(f"metadata missing {key!r}")
    if not v.isdigit():
        raise CheckpointError(f"metadata {key}={v!r} is not a decimal integer")
    return int(v)


def metadata_to_dims(meta: dict[str, str]) -> ModelDims:
    if meta.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unknown format tag {meta.get('format')!r}")
    kw: dict = {k: _parse_int(meta, k) for k in _INT_FIELDS}
    for k in _BOOL_FIELDS:
        v = meta.get(k)
        if v not in ("0", "1"):
            raise CheckpointError(f"metadata {k}={v!r} must be 0 or 1")
        kw[k] = v == "1"
    try:
        kw["norm_eps"] = float(meta["norm_eps"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad norm_eps metadata: {e}") from e
    if ("head_counts" in meta) != ("group_counts" in meta):
        raise CheckpointError("head_counts and group_counts must appear together")
    if "head_counts" in meta:
        try:
            kw["head_counts"] = tuple(int(s) for s in meta["head_counts"].split(","))
            kw["group_counts"] = tuple(int(s) for s in meta["group_counts"].split(","))
        except ValueError as e:
            raise CheckpointError(f"bad per-layer counts: {e}") from e
        if kw["n_heads"] != max(kw["head_counts"]) or kw["n_groups"] != max(kw["group_counts"]):
            raise CheckpointError("n_heads/n_groups must equal the maxima of the per-layer counts")
    try:
        dims = ModelDims(**kw)
    except DimensionError as e:
        raise CheckpointError(f"inconsistent metadata dims: {e}") from e
    if meta.get("head_pattern") != dims.head_pattern:
        raise CheckpointError(f"head_pattern {meta.get('head_pattern')!r} disagrees with dims ({dims.head_pattern})")
    return dims


def write_checkpoint(path, model: Model) -> None:
    write_tensors(path, model.params.named_tensors(), dims_to_metadata(model.dims))


def read_checkpoint(path) -> Model:
    tensors, meta = read_tensors(path)
    return model_from_tensors(tensors, meta)


def model_from_tensors(tensors: dict[str, Tensor], meta: dict[str, str]) -> Model:
    dims = metadata_to_dims(meta)
    want = expected_shapes(dims)
    missing = sorted(set(want) - set(tensors))
    extra = sorted(set(tensors) - set(want))
    if missing or extra:
        raise CheckpointError(f"tensor names inconsistent with metadata dims: missing {missing}, unexpected {extra}")
    for name, shape in want.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name}: shape {list(tensors[name].shape)} inconsistent with metadata dims {list(shape)}")
    layers = []
    for i in range(dims.n_layers):
        pre = f"layers.{i}."
        layers.append(block_from_tensors({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}))
    params = ModelParams(embedding=tensors["embedding.weight"], norm_f=tensors["norm_f.weight"], layers=tuple(layers))
    return Model(dims, params)
