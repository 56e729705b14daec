"""Dense fp32 tensors and an opt-in reverse-mode tape.

Values are stored as read-only ``float32`` numpy arrays.  Reductions that can
drift (matmul inner products, norms, the SSD state scan) accumulate in
``float64`` and are rounded back to ``float32`` on output.

Gradients are only recorded while a :class:`Tape` is active *and* at least one
input was registered with :meth:`Tape.watch`; plain forward evaluation never
allocates tape records.

    >>> tape = Tape()
    >>> with tape:
    ...     w = tape.watch(Tensor([1.0, 2.0]), "w")
    ...     loss = sum_all(mul(w, Tensor([3.0, 4.0])))
    >>> backward(tape, loss)["w"].numpy()
    array([3., 4.], dtype=float32)
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError

F32 = np.float32
F64 = np.float64

SOFTPLUS_THRESHOLD = 20.0
_F32_MAX = float(np.finfo(np.float32).max)


class Tensor:
    """Immutable dense fp32 array with at least one dimension."""

    __slots__ = ("_data", "_node", "_tape")

    def __init__(self, data, *, _node: Optional[int] = None, _tape: Optional["Tape"] = None):
        arr = np.array(data, dtype=F32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        arr.flags.writeable = False
        self._data = arr
        self._node = _node
        self._tape = _tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        with np.errstate(over="ignore"):
            arr = np.asarray(arr, dtype=F32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op} produced non-finite values")
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t._data = arr
        t._node = None
        t._tape = None
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=F32))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self._node}" if self._node is not None else ""
        return f"Tensor(shape={list(self.shape)}{tag})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor) and self.shape == other.shape and np.array_equal(self._data, other._data)

    __hash__ = None  # type: ignore[assignment]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Record:
    """One recorded op. ``output`` is a node id, or a tuple of ids for multi-output ops."""

    __slots__ = ("inputs", "output", "backward", "op")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Node ids increase monotonically, so the recording order is already a
    topological order; :func:`backward` walks it in reverse.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: dict[int, str] = {}
        self._shapes: dict[int, tuple] = {}
        self._next = 0

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _new_node(self, shape) -> int:
        nid = self._next
        self._next += 1
        self._shapes[nid] = tuple(shape)
        return nid

    def watch(self, t: Tensor, name: Optional[str] = None) -> Tensor:
        """Register ``t`` as a leaf; returns a tracked alias sharing its data."""
        leaf = Tensor._wrap(t.data, "watch")
        leaf._node = self._new_node(t.shape)
        leaf._tape = self
        self._leaves[leaf._node] = name if name is not None else str(leaf._node)
        return leaf

    @property
    def op_names(self) -> list[str]:
        return [r.op for r in self._records]


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data, op)
    tape = _active_tape()
    if tape is None:
        return out
    ids = [t._node if t._tape is tape else None for t in inputs]
    if all(i is None for i in ids):
        return out
    out._node = tape._new_node(out.shape)
    out._tape = tape
    tape._records.append(_Record(op, ids, out._node, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Reverse sweep from a scalar ``loss``; returns one gradient per leaf, keyed by name.

    Leaves the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if loss._tape is not tape or loss._node is None:
        raise DimensionError("loss node is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss._node: np.ones(loss.shape, dtype=F64)}
    for rec in reversed(tape._records):
        if isinstance(rec.output, tuple):
            gs = tuple(grads.pop(o, None) for o in rec.output)
            if all(g is None for g in gs):
                continue
            parts = rec.backward(gs)
        else:
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            parts = rec.backward(g)
        for nid, gi in zip(rec.inputs, parts):
            if nid is None or gi is None:
                continue
            gi = np.asarray(gi, dtype=F64).reshape(tape._shapes[nid])
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    out = {}
    for nid, name in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros(tape._shapes[nid], dtype=F64)
        out[name] = Tensor._wrap(g, "backward")
    return out


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    safe = np.minimum(x, SOFTPLUS_THRESHOLD)
    return np.where(x > SOFTPLUS_THRESHOLD, x, np.log1p(np.exp(safe)))


def _softplus_grad_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > SOFTPLUS_THRESHOLD, 1.0, sigmoid(x))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``c[i, j] = sum_k a[i, k] * b[k, j]`` with a float64 inner product."""
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    a64 = a.data.astype(F64)
    b64 = b.data.astype(F64)

    def bw(g):
        return g @ b64.T, a64.T @ g

    return _result("matmul", a64 @ b64, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {list(x.shape)}")
    return _result("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: {list(x.shape)} -> {list(shape)} changes element count")
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along the last axis."""
    d = x.shape[-1]
    if not 0 <= start <= stop <= d:
        raise DimensionError(f"take: range [{start}, {stop}) outside last extent {d}")
    old = x.shape

    def bw(g):
        full = np.zeros(old, dtype=F64)
        full[..., start:stop] = g
        return (full,)

    return _result("take", x.data[..., start:stop], (x,), bw)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.ndim != 1 or ids.size == 0:
        raise DimensionError("embedding: ids must be a non-empty 1-d sequence")
    if ids.min() < 0 or ids.max() >= v:
        raise DimensionError(f"embedding: token id out of range [0, {v})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=F64)
        np.add.at(full, ids, g)
        return (full,)

    return _result("embedding", table.data[ids], (table,), bw)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def silu(x: Tensor) -> Tensor:
    xd = x.data.astype(F64)
    s = sigmoid(xd)
    return _result("silu", xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    """``ln(1 + e^x)``; returns ``x`` itself above the overflow threshold of 20."""
    xd = x.data.astype(F64)
    return _result("softplus", _softplus_np(xd), (x,), lambda g: (g * _softplus_grad_np(xd),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data.astype(F64))
    return _result("exp", y, (x,), lambda g: (g * y,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad = a.data.astype(F64)
    bd = b.data.astype(F64)
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data.astype(F64) + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data.astype(F64) - b.data, (a, b), lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    return _result("scale", x.data.astype(F64) * c, (x,), lambda g: (g * c,))


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector along the last axis of ``x``."""
    if len(b.shape) != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_row: bias {list(b.shape)} does not match last extent of {list(x.shape)}")
    lead = tuple(range(len(x.shape) - 1))
    return _result("add_row", x.data.astype(F64) + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


_UNARY = {"silu": silu, "softplus": softplus, "exp": exp}
_BINARY = {"mul": mul, "add": add}


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name: unary ``silu``/``softplus``/``exp``, binary ``mul``/``add``."""
    if kind in _UNARY:
        if b is not None:
            raise DimensionError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise DimensionError(f"{kind} takes two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# reductions / normalisation
# --------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum_all", np.array([x.data.astype(F64).sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.size
    return _result("mean_all", np.array([x.data.astype(F64).mean()]), (x,), lambda g: (np.full(shape, g[0] / n),))


def rmsnorm(
    x: Tensor,
    weight: Tensor,
    eps: float,
    group_size: Optional[int] = None,
    divisor: Optional[float] = None,
) -> Tensor:
    """``y_i = weight_i * x_i / sqrt(sum_j x_j^2 / divisor + eps)``.

    The sum runs over consecutive groups of ``group_size`` entries of the last
    axis (default: the whole axis). ``divisor`` defaults to the group size, which
    gives the usual mean of squares.
    """
    d = x.shape[-1]
    if len(weight.shape) != 1 or weight.shape[0] != d:
        raise DimensionError(f"rmsnorm: weight {list(weight.shape)} does not match last extent {d}")
    gs = d if group_size is None else int(group_size)
    if gs <= 0 or d % gs:
        raise DimensionError(f"rmsnorm: group size {gs} does not divide {d}")
    div = float(gs if divisor is None else divisor)
    lead = x.shape[:-1]
    xg = x.data.astype(F64).reshape(lead + (d // gs, gs))
    w = weight.data.astype(F64).reshape(d // gs, gs)
    r = 1.0 / np.sqrt((xg * xg).sum(axis=-1, keepdims=True) / div + eps)
    y = (w * xg * r).reshape(x.shape)
    red = tuple(range(len(lead)))

    def bw(g):
        gg = g.reshape(xg.shape)
        gw = (gg * xg * r).sum(axis=red).reshape(d)
        gxh = gg * w
        gx = r * gxh - (r**3 / div) * xg * (gxh * xg).sum(axis=-1, keepdims=True)
        return gx.reshape(x.shape), gw

    return _result("rmsnorm", y, (x, weight), bw)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean of ``-log softmax(logits[t])[targets[t]]`` over rows."""
    tg = np.asarray(targets, dtype=np.int64)
    if len(logits.shape) != 2 or tg.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {list(logits.shape)} vs {tg.size} targets")
    if tg.size == 0 or tg.min() < 0 or tg.max() >= logits.shape[1]:
        raise DimensionError("cross_entropy: target id out of range")
    z = logits.data.astype(F64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(tg.size)
    nll = lse - z[rows, tg]
    n = tg.size

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, tg] -= 1.0
        return (p * (g[0] / n),)

    return _result("cross_entropy", np.array([nll.mean()]), (logits,), bw)


# --------------------------------------------------------------------------
# sequence ops
# --------------------------------------------------------------------------


def conv1d_depthwise_causal(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """``y[c,t] = bias[c] + sum_k w[c,k] * x[c, t-K+1+k]`` with zero left padding."""
    if len(x.shape) != 2 or len(w.shape) != 2 or len(bias.shape) != 1:
        raise DimensionError(f"conv1d: expected x[C,T], w[C,K], bias[C]; got {list(x.shape)}, {list(w.shape)}, {list(bias.shape)}")
    c, t = x.shape
    if w.shape[0] != c or bias.shape[0] != c:
        raise DimensionError(f"conv1d: channel mismatch x {c}, w {w.shape[0]}, bias {bias.shape[0]}")
    k = w.shape[1]
    if k < 1:
        raise DimensionError("conv1d: kernel width must be >= 1")
    xp = np.zeros((c, t + k - 1), dtype=F64)
    xp[:, k - 1 :] = x.data
    wd = w.data.astype(F64)
    y = np.repeat(bias.data.astype(F64)[:, None], t, axis=1)
    for j in range(k):
        y += wd[:, j : j + 1] * xp[:, j : j + t]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty((c, k), dtype=F64)
        for j in range(k):
            gxp[:, j : j + t] += wd[:, j : j + 1] * g
            gw[:, j] = (g * xp[:, j : j + t]).sum(axis=1)
        return gxp[:, k - 1 :], gw, g.sum(axis=1)

    return _result("conv1d", y, (x, w, bias), bw)


def group_index(n_heads: int, n_groups: int) -> np.ndarray:
    """Contiguous head-to-group map ``g = h * G // H``."""
    if n_groups <= 0 or n_heads % n_groups:
        raise DimensionError(f"{n_heads} heads cannot be split into {n_groups} groups")
    return np.arange(n_heads) * n_groups // n_heads


def ssd_sequential(
    x: Tensor,
    B: Tensor,
    C: Tensor,
    dt_raw: Tensor,
    A_log: Tensor,
    D: Tensor,
    dt_bias: Tensor,
    h0: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Sequential selective-state recurrence.

    For each step ``t`` and head ``h`` (group ``g``)::

        delta = softplus(dt_raw[t,h] + dt_bias[h]);  a = -exp(A_log[h])
        S     = exp(delta * a) * S + (delta * x[t,h]) outer B[t,g]
        y[t,h] = S @ C[t,g] + D[h] * x[t,h]

    Returns ``(y[T,H,P], final_state[H,P,N])``.
    """
    if len(x.shape) != 3 or len(B.shape) != 3 or len(C.shape) != 3:
        raise DimensionError("ssd: x, B, C must be 3-d")
    T, H, P = x.shape
    _, G, N = B.shape
    if B.shape[0] != T or C.shape != B.shape:
        raise DimensionError(f"ssd: B {list(B.shape)} / C {list(C.shape)} inconsistent with x {list(x.shape)}")
    if dt_raw.shape != (T, H):
        raise DimensionError(f"ssd: dt {list(dt_raw.shape)} != [{T}, {H}]")
    for name, v in (("A_log", A_log), ("D", D), ("dt_bias", dt_bias)):
        if v.shape != (H,):
            raise DimensionError(f"ssd: {name} {list(v.shape)} != [{H}]")
    if h0 is not None and h0.shape != (H, P, N):
        raise DimensionError(f"ssd: h0 {list(h0.shape)} != [{H}, {P}, {N}]")
    gidx = group_index(H, G)

    xd = x.data.astype(F64)
    Bh = B.data.astype(F64)[:, gidx, :]
    Ch = C.data.astype(F64)[:, gidx, :]
    pre = dt_raw.data.astype(F64) + dt_bias.data.astype(F64)
    delta = _softplus_np(pre)
    a = -np.exp(A_log.data.astype(F64))
    decay = np.exp(delta * a)
    Dd = D.data.astype(F64)

    inputs = (x, B, C, dt_raw, A_log, D, dt_bias) + ((h0,) if h0 is not None else ())
    tape = _active_tape()
    recording = tape is not None and any(t._tape is tape and t._node is not None for t in inputs)

    S = np.zeros((H, P, N), dtype=F64) if h0 is None else h0.data.astype(F64)
    S_init = S.copy()
    states = np.empty((T, H, P, N), dtype=F64) if recording else None
    y = np.empty((T, H, P), dtype=F64)
    for t in range(T):
        S = decay[t][:, None, None] * S + (delta[t][:, None] * xd[t])[:, :, None] * Bh[t][:, None, :]
        # the state is exchanged in fp32, so leaving that range counts as overflow
        if not np.all(np.abs(S) <= _F32_MAX):
            raise NumericError(f"ssd: non-finite state at step {t}")
        y[t] = np.einsum("hpn,hn->hp", S, Ch[t]) + Dd[:, None] * xd[t]
        if not np.all(np.abs(y[t]) <= _F32_MAX):
            raise NumericError(f"ssd: non-finite output at step {t}")
        if recording:
            states[t] = S
    final = S

    def bw(g):
        gy, gS_out = g
        if gy is None:
            gy = np.zeros_like(y)
        hpg = H // G
        gx = np.zeros_like(xd)
        gBh = np.zeros_like(Bh)
        gCh = np.zeros_like(Ch)
        gdelta = np.zeros_like(delta)
        gA = np.zeros(H, dtype=F64)
        gD = (gy * xd).sum(axis=(0, 2))
        gx += Dd[None, :, None] * gy
        dS = np.zeros((H, P, N), dtype=F64) if gS_out is None else gS_out.copy()
        for t in range(T - 1, -1, -1):
            St = states[t]
            dS += gy[t][:, :, None] * Ch[t][:, None, :]
            gCh[t] = np.einsum("hp,hpn->hn", gy[t], St)
            prev = states[t - 1] if t > 0 else S_init
            gdecay = (dS * prev).sum(axis=(1, 2))
            dxB = dS * Bh[t][:, None, :]
            gdelta[t] = (dxB.sum(axis=2) * xd[t]).sum(axis=1) + gdecay * decay[t] * a
            gA += gdecay * decay[t] * delta[t]
            gx[t] += delta[t][:, None] * dxB.sum(axis=2)
            gBh[t] = np.einsum("hpn,hp->hn", dS, delta[t][:, None] * xd[t])
            dS = decay[t][:, None, None] * dS
        gpre = gdelta * _softplus_grad_np(pre)
        gB = gBh.reshape(T, G, hpg, N).sum(axis=2)
        gC = gCh.reshape(T, G, hpg, N).sum(axis=2)
        grads = [gx, gB, gC, gpre, gA * a, gD, gpre.sum(axis=0)]
        if h0 is not None:
            grads.append(dS)
        return grads

    y_t = Tensor._wrap(y, "ssd")
    s_t = Tensor._wrap(final, "ssd")
    if recording:
        ids = [t._node if t._tape is tape else None for t in inputs]
        y_t._node = tape._new_node(y_t.shape)
        s_t._node = tape._new_node(s_t.shape)
        y_t._tape = s_t._tape = tape
        tape._records.append(_Record("ssd", ids, (y_t._node, s_t._node), bw))
    return y_t, s_t
