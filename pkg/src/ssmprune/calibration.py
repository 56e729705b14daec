"""Calibration data and the statistics the scorers consume.

* activation moments per linear layer input (WANDA feature norms, FLAP
  mean/variance), merged with Chan's parallel update so results do not depend
  on how sequences are partitioned;
* Taylor saliency, ``sum over sequences of (grad * weight)^2`` per parameter.

Per-sequence partials are always reduced in sequence order, so the thread
count never changes a single bit of the output.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import read_tensors, write_tensors
from .errors import CalibrationError, NumericError
from .model import SSM_COMPONENTS, Model, ModelParams, block_from_tensors, sequence_loss, model_forward
from .parallel import parallel_map
from .tensor import Tensor

MAGIC = b"CALB"
DEFAULT_N_SEQ = 20
DEFAULT_SEQ_LEN = 512

LINEAR_KINDS = ("in_proj", "out_proj", "mlp")


@dataclass
class CalibSet:
    sequences: list
    source: str = "memory"

    def __post_init__(self):
        self.sequences = [[int(t) for t in s] for s in self.sequences]
        if any(len(s) == 0 for s in self.sequences):
            raise CalibrationError("calibration sequences must be non-empty")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)

    def check_vocab(self, vocab_size: int) -> None:
        for i, s in enumerate(self.sequences):
            bad = [t for t in s if not 0 <= t < vocab_size]
            if bad:
                raise CalibrationError(f"sequence {i}: token id {bad[0]} outside vocabulary of {vocab_size}")


def write_calib(path, calib: CalibSet) -> None:
    """Binary when the suffix is ``.calb``/``.bin``, otherwise one JSON array per line."""
    path = Path(path)
    if path.suffix in (".calb", ".bin"):
        parts = [MAGIC, struct.pack("<I", len(calib.sequences))]
        for s in calib.sequences:
            parts.append(struct.pack("<I", len(s)))
            parts.append(np.asarray(s, dtype="<u4").tobytes())
        path.write_bytes(b"".join(parts))
    else:
        path.write_text("".join(json.dumps(s, separators=(",", ":")) + "\n" for s in calib.sequences))


def read_calib(path) -> CalibSet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CalibrationError(f"cannot read {path}: {e}") from e
    if path.suffix in (".calb", ".bin"):
        if blob[:4] != MAGIC:
            raise CalibrationError(f"{path}: missing CALB magic")
        pos = 4
        try:
            (count,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            seqs = []
            for _ in range(count):
                (n,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                if pos + 4 * n > len(blob):
                    raise CalibrationError(f"{path}: truncated sequence")
                seqs.append(np.frombuffer(blob, dtype="<u4", count=n, offset=pos).tolist())
                pos += 4 * n
        except struct.error as e:
            raise CalibrationError(f"{path}: truncated file") from e
        if pos != len(blob):
            raise CalibrationError(f"{path}: {len(blob) - pos} trailing bytes")
    else:
        seqs = []
        for ln, line in enumerate(blob.decode("utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                s = json.loads(line)
            except json.JSONDecodeError as e:
                raise CalibrationError(f"{path}:{ln}: {e}") from e
            if not isinstance(s, list) or not all(isinstance(t, int) and t >= 0 for t in s):
                raise CalibrationError(f"{path}:{ln}: expected a JSON array of token ids")
            seqs.append(s)
    return CalibSet(seqs, source=str(path))


# --------------------------------------------------------------------------
# activation statistics
# --------------------------------------------------------------------------


class Moments:
    """Streaming count / mean / M2 / sum-of-squares for one feature vector."""

    __slots__ = ("n", "mean", "m2", "sumsq")

    def __init__(self, d: int):
        self.n = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros(d)
        self.sumsq = np.zeros(d)

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        x = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        m = cls(x.shape[1])
        m.n = x.shape[0]
        m.mean = x.mean(axis=0)
        m.m2 = ((x - m.mean) ** 2).sum(axis=0)
        m.sumsq = (x * x).sum(axis=0)
        return m

    def merge(self, other: "Moments") -> "Moments":
        out = Moments(self.mean.size)
        n = self.n + other.n
        if n == 0:
            return out
        delta = other.mean - self.mean
        out.n = n
        out.mean = self.mean + delta * (other.n / n)
        out.m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        out.sumsq = self.sumsq + other.sumsq
        return out


@dataclass
class LayerStats:
    feature_l2: Tensor
    feature_mean: Tensor
    feature_var: Tensor
    token_count: int


@dataclass
class ActivationStats:
    layers: dict = field(default_factory=dict)
    _moments: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_moments(cls, moments: dict[str, Moments]) -> "ActivationStats":
        layers = {}
        for name, m in moments.items():
            layers[name] = LayerStats(
                feature_l2=Tensor(np.sqrt(m.sumsq)),
                feature_mean=Tensor(m.mean),
                feature_var=Tensor(np.maximum(m.m2 / m.n, 0.0)),
                token_count=m.n,
            )
        return cls(layers, dict(moments))

    def __getitem__(self, name: str) -> LayerStats:
        try:
            return self.layers[name]
        except KeyError:
            raise CalibrationError(f"no activation statistics for {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        if set(self._moments) != set(other._moments):
            raise CalibrationError("cannot merge statistics over different layer sets")
        return ActivationStats.from_moments({k: self._moments[k].merge(other._moments[k]) for k in sorted(self._moments)})


def linear_layer_names(model: Model) -> list[str]:
    names = []
    for i, blk in enumerate(model.params.layers):
        names += [f"layers.{i}.in_proj", f"layers.{i}.out_proj"]
        if blk.mlp_gate is not None:
            names += [f"layers.{i}.mlp.gate", f"layers.{i}.mlp.up", f"layers.{i}.mlp.down"]
    return names


def resolve_targets(model: Model, targets: Optional[Iterable[str]]) -> list[str]:
    """Expand kinds (``in_proj``, ``out_proj``, ``mlp``) or exact layer names."""
    names = linear_layer_names(model)
    if targets is None:
        return names
    out = []
    for t in targets:
        if t in LINEAR_KINDS:
            hit = [n for n in names if re.fullmatch(rf"layers\.\d+\.{re.escape(t)}(\..*)?", n)]
        else:
            hit = [t] if t in names else []
        if not hit:
            raise CalibrationError(f"unknown target {t!r}; linear layers are {names}")
        out += [h for h in hit if h not in out]
    return [n for n in names if n in out]


def _sequence_moments(model: Model, seq: Sequence[int], targets: list[str]) -> dict[str, Moments]:
    wanted = set(targets)
    got: dict[str, Moments] = {}

    def capture(name, x):
        if name in wanted:
            got[name] = Moments.of(x)

    model_forward(model, seq, capture=capture)
    return got


def collect_activation_stats(
    model: Model, calib: CalibSet, targets: Optional[Iterable[str]] = None, threads: int = 1
) -> ActivationStats:
    if len(calib) == 0:
        raise CalibrationError("empty calibration set")
    calib.check_vocab(model.dims.vocab_size)
    names = resolve_targets(model, targets)
    parts = parallel_map(lambda s: _sequence_moments(model, s, names), calib.sequences, threads)
    total = {n: Moments(parts[0][n].mean.size) for n in names}
    for p in parts:
        for n in names:
            total[n] = total[n].merge(p[n])
    return ActivationStats.from_moments(total)


# --------------------------------------------------------------------------
# Taylor saliency
# --------------------------------------------------------------------------


@dataclass
class TaylorAccumulator:
    """Running ``sum (g * w)^2`` per parameter tensor, keyed by checkpoint name."""

    sums: dict = field(default_factory=dict)
    passes: int = 0

    def add(self, contrib: dict[str, np.ndarray]) -> None:
        for k, v in contrib.items():
            self.sums[k] = self.sums[k] + v if k in self.sums else np.array(v, dtype=np.float64)
        self.passes += 1

    def merge(self, other: "TaylorAccumulator") -> "TaylorAccumulator":
        out = TaylorAccumulator({k: v.copy() for k, v in self.sums.items()}, self.passes + other.passes)
        for k, v in other.sums.items():
            out.sums[k] = out.sums[k] + v if k in out.sums else v.copy()
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.sums[name]
        except KeyError:
            raise CalibrationError(f"Taylor accumulator has no entry for {name!r}") from None


def _watched_model(model: Model, tape: T.Tape) -> tuple[Model, dict[str, Tensor]]:
    layers = []
    watched = {}
    for i, blk in enumerate(model.params.layers):
        ts = dict(blk.tensors())
        for comp in SSM_COMPONENTS:
            name = f"layers.{i}.{comp}"
            ts[comp] = watched[name] = tape.watch(ts[comp], name)
        layers.append(block_from_tensors(ts))
    params = ModelParams(model.params.embedding, model.params.norm_f, tuple(layers))
    return Model(model.dims, params), watched


def taylor_contribution(model: Model, seq: Sequence[int]) -> dict[str, np.ndarray]:
    """``(grad * weight)^2`` of the mean next-token loss of one sequence."""
    tape = T.Tape()
    with tape:
        wm, watched = _watched_model(model, tape)
        try:
            loss = sequence_loss(wm, seq)
        except NumericError as e:
            raise CalibrationError(f"non-finite calibration loss: {e}") from e
    grads = T.backward(tape, loss)
    out = {}
    for name, w in watched.items():
        gw = grads[name].data.astype(np.float64) * w.data.astype(np.float64)
        out[name] = gw * gw
    return out


def accumulate_taylor(model: Model, calib: CalibSet, threads: int = 1) -> TaylorAccumulator:
    if len(calib) == 0:
        raise CalibrationError("empty calibration set")
    calib.check_vocab(model.dims.vocab_size)
    if any(len(s) < 2 for s in calib.sequences):
        raise CalibrationError("Taylor accumulation needs sequences of at least 2 tokens")
    acc = TaylorAccumulator()
    for contrib in parallel_map(lambda s: taylor_contribution(model, s), calib.sequences, threads):
        acc.add(contrib)
    return acc


# --------------------------------------------------------------------------
# bundle on disk
# --------------------------------------------------------------------------


def save_bundle(path, stats: Optional[ActivationStats] = None, taylor: Optional[TaylorAccumulator] = None) -> None:
    """Stats bundle in the checkpoint container (moments kept in fp32)."""
    tensors: dict[str, Tensor] = {}
    meta = {"format": "ssmprune-calib/1"}
    if stats is not None:
        for name, m in stats._moments.items():
            tensors[f"act.{name}.mean"] = Tensor(m.mean)
            tensors[f"act.{name}.m2"] = Tensor(m.m2)
            tensors[f"act.{name}.sumsq"] = Tensor(m.sumsq)
            meta[f"act.{name}.token_count"] = str(m.n)
    if taylor is not None:
        for name, v in taylor.sums.items():
            tensors[f"taylor.{name}"] = Tensor(v)
        meta["taylor.passes"] = str(taylor.passes)
    write_tensors(path, tensors, meta)


def load_bundle(path) -> tuple[Optional[ActivationStats], Optional[TaylorAccumulator]]:
    tensors, meta = read_tensors(path)
    if meta.get("format") != "ssmprune-calib/1":
        raise CalibrationError(f"{path} is not a calibration bundle")
    moments = {}
    for key, v in meta.items():
        m = re.fullmatch(r"act\.(.+)\.token_count", key)
        if m:
            name = m.group(1)
            mo = Moments(tensors[f"act.{name}.mean"].size)
            mo.n = int(v)
            mo.mean = tensors[f"act.{name}.mean"].data.astype(np.float64)
            mo.m2 = tensors[f"act.{name}.m2"].data.astype(np.float64)
            mo.sumsq = tensors[f"act.{name}.sumsq"].data.astype(np.float64)
            moments[name] = mo
    stats = ActivationStats.from_moments(dict(sorted(moments.items()))) if moments else None
    taylor = None
    if "taylor.passes" in meta:
        taylor = TaylorAccumulator(
            {k[len("taylor."):]: t.data.astype(np.float64) for k, t in tensors.items() if k.startswith("taylor.")},
            int(meta["taylor.passes"]),
        )
    return stats, taylor
