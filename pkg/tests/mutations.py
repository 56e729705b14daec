"""Checkpoint blob surgery: split, rejoin and single-field header mutations."""
import json
import struct

from ssmprune.checkpoint import encode_header, model_from_tensors, parse_tensors


def split_blob(blob):
    (n,) = struct.unpack("<Q", blob[:8])
    return json.loads(blob[8 : 8 + n]), blob[8 + n :]


def join_blob(header, payload):
    h = encode_header(header)
    return struct.pack("<Q", len(h)) + h + payload


def load_blob(blob):
    return model_from_tensors(*parse_tensors(blob))


VALUE_FIELDS = ("norm_eps", "norm_div")


def header_mutations(header):
    """Every 1-field mutation that breaks a header invariant, as (label, header')."""
    out = []

    def mut(label, fn):
        h = json.loads(json.dumps(header))
        fn(h)
        out.append((label, h))

    for name, rec in header.items():
        if name == "__metadata__":
            continue
        shape = rec["shape"]
        for dt in ("F16", "BF16", "F64", "I32", "f32"):
            mut(f"{name}:dtype={dt}", lambda h, n=name, d=dt: h[n].__setitem__("dtype", d))
        mut(f"{name}:shape+1", lambda h, n=name: h[n].__setitem__("shape", [s + 1 for s in shape]))
        # same byte span, different rank: only the dims cross-check can catch it
        mut(f"{name}:shape-rank", lambda h, n=name: h[n].__setitem__("shape", shape + [1]))
        if len(shape) == 2 and shape[0] != shape[1]:
            mut(f"{name}:shape-swap", lambda h, n=name: h[n].__setitem__("shape", shape[::-1]))
        b, e = rec["data_offsets"]
        for label, offs in (("begin+4", [b + 4, e]), ("end-4", [b, e - 4]), ("shift", [b + 4, e + 4]), ("rev", [e, b])):
            if offs != [b, e]:
                mut(f"{name}:offsets {label}", lambda h, n=name, o=offs: h[n].__setitem__("data_offsets", o))
        mut(f"{name}:rename", lambda h, n=name: h.__setitem__(n + "x", h.pop(n)))
        mut(f"{name}:extra-key", lambda h, n=name: h[n].__setitem__("extra", 1))
    for key, val in header["__metadata__"].items():
        if key in VALUE_FIELDS:
            bad = ["-1", "abc", ""]
        elif key == "head_pattern":
            bad = [p for p in ("MHA", "GVA", "MVA", "mixed") if p != val]
        elif val.isdigit():
            bad = [str(int(val) + 1), "-" + val, val + ".0"]
        else:
            bad = [val + "x"]
        for b in bad:
            mut(f"meta {key}={b}", lambda h, k=key, v=b: h["__metadata__"].__setitem__(k, v))
        mut(f"meta drop {key}", lambda h, k=key: h["__metadata__"].pop(k))
    return out
