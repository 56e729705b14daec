"""Reference Mamba-2 language model.

Layout of one block (weights stored input-major, ``y = u @ W``)::

    in_proj  [d_model, 2HP + 2GN + H]   packed as  z | x | B | C | dt
    conv1d   [HP + 2GN, K] (+ bias)     applied to x | B | C, then silu
    ssd      A_log, D, dt_bias  [H]
    gate     y * silu(z), then RMSNorm per head (norm.weight [HP])
    out_proj [HP, d_model] (+ optional bias), added to the residual

followed by an optional gated MLP with its own residual.  The LM head is tied to
the embedding table.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

Capture = Callable[[str, np.ndarray], None]


@dataclass(frozen=True)
class BlockDims:
    """Shape parameters of a single block."""

    d_model: int
    n_heads: int
    head_dim: int
    d_state: int
    n_groups: int
    d_conv: int
    norm_div: int
    norm_eps: float = 1e-5
    out_bias: bool = False
    has_mlp: bool = False
    d_mlp: int = 0

    @property
    def d_inner(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def in_proj_width(self) -> int:
        return 2 * self.d_inner + 2 * self.n_groups * self.d_state + self.n_heads

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.n_groups * self.d_state

    @property
    def head_pattern(self) -> str:
        return head_pattern(self.n_heads, self.n_groups)


def head_pattern(n_heads: int, n_groups: int) -> str:
    if n_groups == n_heads:
        return "MHA"
    if n_groups == 1:
        return "MVA"
    return "GVA"


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyperparameters.

    ``head_counts``/``group_counts`` override ``n_heads``/``n_groups`` per layer
    once a method has pruned layers unevenly; :meth:`block` resolves them.
    ``norm_div`` is the divisor of the per-head RMS (0 means ``head_dim``); it
    stays at the original head size when head channels are removed.
    """

    d_model: int
    n_layers: int
    n_heads: int
    head_dim: int
    d_state: int
    n_groups: int
    d_conv: int
    vocab_size: int
    has_mlp: bool = False
    d_mlp: int = 0
    norm_eps: float = 1e-5
    norm_div: int = 0
    out_bias: bool = False
    head_counts: Optional[tuple] = None
    group_counts: Optional[tuple] = None

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "head_dim", "d_state", "n_groups", "d_conv", "vocab_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise DimensionError(f"{name} must be a positive integer, got {v!r}")
        if self.has_mlp != (self.d_mlp > 0):
            raise DimensionError("d_mlp must be positive exactly when has_mlp is set")
        if self.norm_div < 0 or not self.norm_eps > 0:
            raise DimensionError("norm_div must be >= 0 and norm_eps > 0")
        if (self.head_counts is None) != (self.group_counts is None):
            raise DimensionError("head_counts and group_counts must be given together")
        for name in ("head_counts", "group_counts"):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_layers:
                raise DimensionError(f"{name} needs {self.n_layers} entries, got {len(v)}")
        for i in range(self.n_layers):
            h, g = self.layer_heads(i), self.layer_groups(i)
            if h < 1 or g < 1 or h % g:
                raise DimensionError(f"layer {i}: n_heads {h} not divisible by n_groups {g}")

    def layer_heads(self, i: int) -> int:
        return int(self.head_counts[i]) if self.head_counts else self.n_heads

    def layer_groups(self, i: int) -> int:
        return int(self.group_counts[i]) if self.group_counts else self.n_groups

    @property
    def effective_norm_div(self) -> int:
        return self.norm_div or self.head_dim

    def block(self, i: int) -> BlockDims:
        if not 0 <= i < self.n_layers:
            raise IndexError(f"layer {i} out of range")
        return BlockDims(
            d_model=self.d_model,
            n_heads=self.layer_heads(i),
            head_dim=self.head_dim,
            d_state=self.d_state,
            n_groups=self.layer_groups(i),
            d_conv=self.d_conv,
            norm_div=self.effective_norm_div,
            norm_eps=self.norm_eps,
            out_bias=self.out_bias,
            has_mlp=self.has_mlp,
            d_mlp=self.d_mlp,
        )

    @property
    def head_pattern(self) -> str:
        pats = {head_pattern(self.layer_heads(i), self.layer_groups(i)) for i in range(self.n_layers)}
        return pats.pop() if len(pats) == 1 else "mixed"

    def with_layers(self, heads: Sequence[int], groups: Sequence[int], **changes) -> "ModelDims":
        """Copy with per-layer head/group counts, collapsed to scalars when uniform."""
        heads = tuple(int(h) for h in heads)
        groups = tuple(int(g) for g in groups)
        if len(set(heads)) == 1 and len(set(groups)) == 1:
            changes.update(n_heads=heads[0], n_groups=groups[0], head_counts=None, group_counts=None)
        else:
            changes.update(n_heads=max(heads), n_groups=max(groups), head_counts=heads, group_counts=groups)
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["head_counts"] = list(self.head_counts) if self.head_counts else None
        d["group_counts"] = list(self.group_counts) if self.group_counts else None
        return d


PRESETS = {
    # Shape of the public 2.7B Mamba-2 checkpoint (pure SSM, one BC group).
    "mamba2-2.7b": ModelDims(
        d_model=2560, n_layers=64, n_heads=80, head_dim=64, d_state=128, n_groups=1, d_conv=4, vocab_size=50288
    ),
    # Phi-Mamba 1.5B: MHA pattern with MLP blocks.
    "phi-mamba-1.5b": ModelDims(
        d_model=2048, n_layers=24, n_heads=32, head_dim=64, d_state=64, n_groups=32, d_conv=4,
        vocab_size=51200, has_mlp=True, d_mlp=8192,
    ),
    "desk": ModelDims(d_model=4, n_layers=1, n_heads=2, head_dim=3, d_state=4, n_groups=1, d_conv=4, vocab_size=16),
    "tiny": ModelDims(d_model=4, n_layers=1, n_heads=2, head_dim=2, d_state=2, n_groups=1, d_conv=2, vocab_size=8),
    "toy": ModelDims(d_model=32, n_layers=2, n_heads=4, head_dim=16, d_state=8, n_groups=1, d_conv=4, vocab_size=32),
    # default shape of the teacher-planted model used by the sensitivity sweeps
    "planted": ModelDims(d_model=64, n_layers=2, n_heads=8, head_dim=8, d_state=8, n_groups=1, d_conv=4, vocab_size=32),
}


@dataclass(frozen=True)
class BlockParams:
    in_proj: Tensor
    conv_w: Tensor
    conv_b: Tensor
    A_log: Tensor
    D: Tensor
    dt_bias: Tensor
    norm_w: Tensor
    out_proj: Tensor
    out_bias: Optional[Tensor] = None
    mlp_gate: Optional[Tensor] = None
    mlp_up: Optional[Tensor] = None
    mlp_down: Optional[Tensor] = None

    def tensors(self) -> dict[str, Tensor]:
        """Present tensors under their checkpoint component names."""
        out = {
            "in_proj.weight": self.in_proj,
            "conv1d.weight": self.conv_w,
            "conv1d.bias": self.conv_b,
            "A_log": self.A_log,
            "D": self.D,
            "dt_bias": self.dt_bias,
            "norm.weight": self.norm_w,
            "out_proj.weight": self.out_proj,
        }
        if self.out_bias is not None:
            out["out_proj.bias"] = self.out_bias
        if self.mlp_gate is not None:
            out["mlp.gate.weight"] = self.mlp_gate
            out["mlp.up.weight"] = self.mlp_up
            out["mlp.down.weight"] = self.mlp_down
        return out


COMPONENT_FIELDS = {
    "in_proj.weight": "in_proj",
    "conv1d.weight": "conv_w",
    "conv1d.bias": "conv_b",
    "A_log": "A_log",
    "D": "D",
    "dt_bias": "dt_bias",
    "norm.weight": "norm_w",
    "out_proj.weight": "out_proj",
    "out_proj.bias": "out_bias",
    "mlp.gate.weight": "mlp_gate",
    "mlp.up.weight": "mlp_up",
    "mlp.down.weight": "mlp_down",
}

SSM_COMPONENTS = ("in_proj.weight", "conv1d.weight", "conv1d.bias", "A_log", "D", "dt_bias", "norm.weight", "out_proj.weight")


def block_from_tensors(ts: dict[str, Tensor]) -> BlockParams:
    unknown = set(ts) - set(COMPONENT_FIELDS)
    if unknown:
        raise DimensionError(f"unknown block components: {sorted(unknown)}")
    return BlockParams(**{COMPONENT_FIELDS[k]: v for k, v in ts.items()})


@dataclass(frozen=True)
class ModelParams:
    embedding: Tensor
    norm_f: Tensor
    layers: tuple

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embedding.weight": self.embedding, "norm_f.weight": self.norm_f}
        for i, blk in enumerate(self.layers):
            for k, v in blk.tensors().items():
                out[f"layers.{i}.{k}"] = v
        return out


@dataclass(frozen=True)
class Model:
    dims: ModelDims
    params: ModelParams

    def __post_init__(self):
        check_params(self.dims, self.params)

    def __iter__(self):
        return iter((self.dims, self.params))

    def n_params(self) -> int:
        return sum(t.size for t in self.params.named_tensors().values())


def expected_block_shapes(bd: BlockDims) -> dict[str, tuple]:
    shapes = {
        "in_proj.weight": (bd.d_model, bd.in_proj_width),
        "conv1d.weight": (bd.conv_dim, bd.d_conv),
        "conv1d.bias": (bd.conv_dim,),
        "A_log": (bd.n_heads,),
        "D": (bd.n_heads,),
        "dt_bias": (bd.n_heads,),
        "norm.weight": (bd.d_inner,),
        "out_proj.weight": (bd.d_inner, bd.d_model),
    }
    if bd.out_bias:
        shapes["out_proj.bias"] = (bd.d_model,)
    if bd.has_mlp:
        shapes["mlp.gate.weight"] = (bd.d_model, bd.d_mlp)
        shapes["mlp.up.weight"] = (bd.d_model, bd.d_mlp)
        shapes["mlp.down.weight"] = (bd.d_mlp, bd.d_model)
    return shapes


def expected_shapes(dims: ModelDims) -> dict[str, tuple]:
    out = {"embedding.weight": (dims.vocab_size, dims.d_model), "norm_f.weight": (dims.d_model,)}
    for i in range(dims.n_layers):
        for k, s in expected_block_shapes(dims.block(i)).items():
            out[f"layers.{i}.{k}"] = s
    return out


def check_params(dims: ModelDims, params: ModelParams) -> None:
    if len(params.layers) != dims.n_layers:
        raise DimensionError(f"expected {dims.n_layers} layers, got {len(params.layers)}")
    want = expected_shapes(dims)
    have = params.named_tensors()
    missing = sorted(set(want) - set(have))
    extra = sorted(set(have) - set(want))
    if missing or extra:
        raise DimensionError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in want.items():
        if have[name].shape != shape:
            raise DimensionError(f"{name}: shape {list(have[name].shape)} != expected {list(shape)}")


# --------------------------------------------------------------------------
# head bookkeeping
# --------------------------------------------------------------------------


class HeadView:
    """Index ranges of every head/group inside a block's packed tensors."""

    def __init__(self, bd: BlockDims):
        self.bd = bd
        H, P, G, N = bd.n_heads, bd.head_dim, bd.n_groups, bd.d_state
        self.z_off = 0
        self.x_off = H * P
        self.b_off = 2 * H * P
        self.c_off = 2 * H * P + G * N
        self.dt_off = 2 * H * P + 2 * G * N
        self.group_of = T.group_index(H, G)

    def z_cols(self, h: int) -> range:
        P = self.bd.head_dim
        return range(self.z_off + h * P, self.z_off + (h + 1) * P)

    def x_cols(self, h: int) -> range:
        P = self.bd.head_dim
        return range(self.x_off + h * P, self.x_off + (h + 1) * P)

    def b_cols(self, g: int) -> range:
        N = self.bd.d_state
        return range(self.b_off + g * N, self.b_off + (g + 1) * N)

    def c_cols(self, g: int) -> range:
        N = self.bd.d_state
        return range(self.c_off + g * N, self.c_off + (g + 1) * N)

    def dt_col(self, h: int) -> range:
        return range(self.dt_off + h, self.dt_off + h + 1)

    # conv channels are in_proj columns shifted left by the z section
    def conv_x(self, h: int) -> range:
        r = self.x_cols(h)
        return range(r.start - self.x_off, r.stop - self.x_off)

    def conv_b(self, g: int) -> range:
        r = self.b_cols(g)
        return range(r.start - self.x_off, r.stop - self.x_off)

    def conv_c(self, g: int) -> range:
        r = self.c_cols(g)
        return range(r.start - self.x_off, r.stop - self.x_off)

    def out_rows(self, h: int) -> range:
        P = self.bd.head_dim
        return range(h * P, (h + 1) * P)

    def sections(self) -> dict[str, list[range]]:
        bd = self.bd
        return {
            "z": [self.z_cols(h) for h in range(bd.n_heads)],
            "x": [self.x_cols(h) for h in range(bd.n_heads)],
            "B": [self.b_cols(g) for g in range(bd.n_groups)],
            "C": [self.c_cols(g) for g in range(bd.n_groups)],
            "dt": [self.dt_col(h) for h in range(bd.n_heads)],
        }


def split_in_proj(p: BlockParams, bd: BlockDims) -> dict[str, Tensor]:
    """Column slices ``Wz, Wx, WB, WC, Wdt`` of the packed input projection."""
    if p.in_proj.shape != (bd.d_model, bd.in_proj_width):
        raise DimensionError(
            f"in_proj shape {list(p.in_proj.shape)} != [{bd.d_model}, {bd.in_proj_width}] "
            f"(2*{bd.n_heads}*{bd.head_dim} + 2*{bd.n_groups}*{bd.d_state} + {bd.n_heads})"
        )
    hv = HeadView(bd)
    W = p.in_proj
    return {
        "z": T.take(W, hv.z_off, hv.x_off),
        "x": T.take(W, hv.x_off, hv.b_off),
        "B": T.take(W, hv.b_off, hv.c_off),
        "C": T.take(W, hv.c_off, hv.dt_off),
        "dt": T.take(W, hv.dt_off, bd.in_proj_width),
    }


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def block_forward(
    p: BlockParams, u: Tensor, bd: BlockDims, capture: Optional[Capture] = None, prefix: str = ""
) -> Tensor:
    """One residual SSM block (plus MLP when configured); ``u`` is ``[T, d_model]``."""
    if len(u.shape) != 2 or u.shape[1] != bd.d_model:
        raise DimensionError(f"block input {list(u.shape)} is not [T, {bd.d_model}]")
    n_tok = u.shape[0]
    H, P, G, N = bd.n_heads, bd.head_dim, bd.n_groups, bd.d_state
    hv = HeadView(bd)
    if capture is not None:
        capture(prefix + "in_proj", u.data)
    zxbcdt = T.matmul(u, p.in_proj)
    z = T.take(zxbcdt, hv.z_off, hv.x_off)
    xbc = T.take(zxbcdt, hv.x_off, hv.dt_off)
    dt = T.take(zxbcdt, hv.dt_off, bd.in_proj_width)
    xbc = T.silu(T.transpose(T.conv1d_depthwise_causal(T.transpose(xbc), p.conv_w, p.conv_b)))
    x = T.reshape(T.take(xbc, 0, H * P), (n_tok, H, P))
    B = T.reshape(T.take(xbc, H * P, H * P + G * N), (n_tok, G, N))
    C = T.reshape(T.take(xbc, H * P + G * N, H * P + 2 * G * N), (n_tok, G, N))
    y, _ = T.ssd_sequential(x, B, C, dt, p.A_log, p.D, p.dt_bias)
    y = T.mul(T.reshape(y, (n_tok, H * P)), T.silu(z))
    y = T.rmsnorm(y, p.norm_w, bd.norm_eps, group_size=P, divisor=bd.norm_div)
    if capture is not None:
        capture(prefix + "out_proj", y.data)
    out = T.matmul(y, p.out_proj)
    if p.out_bias is not None:
        out = T.add_row(out, p.out_bias)
    h = T.add(u, out)
    if p.mlp_gate is not None:
        if capture is not None:
            capture(prefix + "mlp.gate", h.data)
            capture(prefix + "mlp.up", h.data)
        act = T.mul(T.silu(T.matmul(h, p.mlp_gate)), T.matmul(h, p.mlp_up))
        if capture is not None:
            capture(prefix + "mlp.down", act.data)
        h = T.add(h, T.matmul(act, p.mlp_down))
    return h


def check_tokens(tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise DimensionError("token sequence must be a non-empty 1-d list")
    if ids.min() < 0 or ids.max() >= vocab_size:
        bad = int(ids[(ids < 0) | (ids >= vocab_size)][0])
        raise DimensionError(f"token id {bad} out of range [0, {vocab_size})")
    return ids


def hidden_states(model: Model, tokens: Sequence[int], capture: Optional[Capture] = None) -> Tensor:
    dims, params = model.dims, model.params
    ids = check_tokens(tokens, dims.vocab_size)
    h = T.embedding(params.embedding, ids)
    for i, blk in enumerate(params.layers):
        h = block_forward(blk, h, dims.block(i), capture, prefix=f"layers.{i}.")
    return T.rmsnorm(h, params.norm_f, dims.norm_eps)


def model_forward(model: Model, tokens: Sequence[int], capture: Optional[Capture] = None) -> Tensor:
    """Logits ``[T, vocab]`` through the tied LM head."""
    h = hidden_states(model, tokens, capture)
    return T.matmul(h, T.transpose(model.params.embedding))


def sequence_loss(model: Model, tokens: Sequence[int]) -> Tensor:
    """Mean next-token cross-entropy of one sequence (needs at least 2 tokens)."""
    if len(tokens) < 2:
        raise DimensionError("next-token loss needs sequences of length >= 2")
    logits = model_forward(model, tokens[:-1])
    return T.cross_entropy(logits, tokens[1:])
