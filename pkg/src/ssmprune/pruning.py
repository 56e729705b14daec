"""Pruning plans, their application, and parameter accounting.

Every method produces a :class:`PrunePlan` of explicit index lists and hands it
to :func:`apply_plan`, which owns all dimensional bookkeeping.  Index lists in
a layer plan always refer to the *input* model's axes:

* ``keep_heads`` / ``keep_groups``: value heads and BC groups to retain;
* ``keep_states[g]``: state channels retained in input group ``g``;
* ``keep_headdim[h]``: head channels retained in input head ``h``;
* ``merge_factor`` / ``merge_axis``: mean-pool runs of consecutive groups
  (``bc``) or heads (``x``), applied after the selections;
* ``out_bias_delta``: additive out_proj bias (FLAP compensation);
* ``masks``: flat indices zeroed per component (WANDA).

Ranking convention everywhere: higher score is more important, and among equal
scores the lower index counts as more important.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .calibration import ActivationStats, resolve_targets
from .errors import CalibrationError, PlanError
from .importance import ImportanceScores, flap_head_scores, wanda_scores
from .model import BlockDims, BlockParams, HeadView, Model, ModelDims, ModelParams, block_from_tensors
from .tensor import Tensor

_EPS = 1e-9


# --------------------------------------------------------------------------
# plan types
# --------------------------------------------------------------------------


@dataclass
class LayerPlan:
    keep_heads: Optional[list] = None
    keep_groups: Optional[list] = None
    keep_states: Optional[list] = None
    keep_headdim: Optional[list] = None
    merge_factor: Optional[int] = None
    merge_axis: Optional[str] = None
    out_bias_delta: Optional[list] = None
    masks: Optional[dict] = None

    def is_identity(self) -> bool:
        return all(v is None for v in asdict(self).values())


@dataclass
class PrunePlan:
    method: str
    layers: list
    targets: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def is_identity(self) -> bool:
        return all(lp.is_identity() for lp in self.layers)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "targets": list(self.targets),
            "notes": list(self.notes),
            "layers": [{k: v for k, v in asdict(lp).items() if v is not None} for lp in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        try:
            layers = [LayerPlan(**lp) for lp in d["layers"]]
            return cls(d["method"], layers, list(d.get("targets", [])), list(d.get("notes", [])))
        except (KeyError, TypeError) as e:
            raise PlanError(f"malformed plan: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise PlanError(f"malformed plan JSON: {e}") from e


def identity_plan(dims: ModelDims, method: str = "identity") -> PrunePlan:
    return PrunePlan(method, [LayerPlan() for _ in range(dims.n_layers)])


# --------------------------------------------------------------------------
# parameter accounting
# --------------------------------------------------------------------------


def block_counts(bd: BlockDims) -> dict[str, int]:
    """Closed-form SSM parameter counts of one block, by component."""
    return {
        "in_proj": bd.d_model * bd.in_proj_width,
        "conv": bd.conv_dim * (bd.d_conv + 1),
        "out_proj": bd.d_inner * bd.d_model + (bd.d_model if bd.out_bias else 0),
        "misc": 3 * bd.n_heads + bd.d_inner,
    }


def ssm_params(dims: ModelDims) -> int:
    return sum(sum(block_counts(dims.block(i)).values()) for i in range(dims.n_layers))


def model_params(dims: ModelDims) -> int:
    mlp = 3 * dims.d_model * dims.d_mlp if dims.has_mlp else 0
    return ssm_params(dims) + dims.n_layers * mlp + dims.vocab_size * dims.d_model + dims.d_model


def component_fractions(dims: ModelDims) -> dict[str, float]:
    tot = {"in_proj": 0, "conv": 0, "out_proj": 0, "misc": 0}
    for i in range(dims.n_layers):
        for k, v in block_counts(dims.block(i)).items():
            tot[k] += v
    s = sum(tot.values())
    return {k: v / s for k, v in tot.items()}


@dataclass
class PruneReport:
    layers: list
    ssm_before: int
    ssm_after: int
    ssm_compression: float
    model_before: int
    model_after: int
    model_compression: float
    fractions_before: dict
    fractions_after: dict
    sparsity: float
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def compression_report(dims_before: ModelDims, dims_after: ModelDims) -> PruneReport:
    """Closed-form before/after counts; ``sparsity`` defaults to the whole-model compression."""
    if dims_before.n_layers != dims_after.n_layers:
        raise PlanError("compression_report needs matching layer counts")
    layers = []
    for i in range(dims_before.n_layers):
        b = sum(block_counts(dims_before.block(i)).values())
        a = sum(block_counts(dims_after.block(i)).values())
        layers.append({"layer": i, "before": b, "after": a})
    sb, sa = ssm_params(dims_before), ssm_params(dims_after)
    mb, ma = model_params(dims_before), model_params(dims_after)
    mc = 1.0 - ma / mb
    return PruneReport(
        layers=layers,
        ssm_before=sb,
        ssm_after=sa,
        ssm_compression=1.0 - sa / sb,
        model_before=mb,
        model_after=ma,
        model_compression=mc,
        fractions_before=component_fractions(dims_before),
        fractions_after=component_fractions(dims_after),
        sparsity=mc,
    )


# --------------------------------------------------------------------------
# plan validation and application
# --------------------------------------------------------------------------


def _check_index_list(what: str, idx, n: int) -> list:
    if not isinstance(idx, (list, tuple)) or not idx:
        raise PlanError(f"{what}: must be a non-empty list")
    idx = [int(i) for i in idx]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise PlanError(f"{what}: indices must be strictly increasing")
    if idx[0] < 0 or idx[-1] >= n:
        raise PlanError(f"{what}: index out of range [0, {n})")
    return idx


def _rectangular(what: str, lists: list, count: int, n: int) -> list:
    if not isinstance(lists, (list, tuple)) or len(lists) != count:
        raise PlanError(f"{what}: expected {count} index lists")
    out = [_check_index_list(f"{what}[{j}]", l, n) for j, l in enumerate(lists)]
    if len({len(l) for l in out}) != 1:
        raise PlanError(f"{what}: every entry must keep the same number of channels")
    return out


def _resolve_layer(lp: LayerPlan, bd: BlockDims) -> dict:
    """Validate a layer plan against its block dims; returns normalised index sets."""
    H, G, P, N = bd.n_heads, bd.n_groups, bd.head_dim, bd.d_state
    hpg = H // G
    heads = list(range(H)) if lp.keep_heads is None else _check_index_list("keep_heads", lp.keep_heads, H)
    if lp.keep_groups is None:
        if lp.keep_heads is not None and G > 1 and G == H:
            raise PlanError("keep_groups is required when pruning heads of an MHA layer")
        groups = list(range(G))
    else:
        groups = _check_index_list("keep_groups", lp.keep_groups, G)
    if len(heads) % len(groups):
        raise PlanError(f"kept head count {len(heads)} is not a multiple of kept group count {len(groups)}")
    per = len(heads) // len(groups)
    for j, g in enumerate(groups):
        mine = [h for h in heads if h // hpg == g]
        if len(mine) != per:
            raise PlanError(f"group {g} keeps {len(mine)} heads, expected {per} for a contiguous head-to-group map")
        if heads[j * per : (j + 1) * per] != mine:
            raise PlanError("kept heads must be ordered by group")
    if any(h // hpg not in groups for h in heads):
        raise PlanError("a kept head belongs to a removed group")
    states = [list(range(N))] * G if lp.keep_states is None else _rectangular("keep_states", lp.keep_states, G, N)
    chans = [list(range(P))] * H if lp.keep_headdim is None else _rectangular("keep_headdim", lp.keep_headdim, H, P)
    if lp.out_bias_delta is not None and len(lp.out_bias_delta) != bd.d_model:
        raise PlanError(f"out_bias_delta needs {bd.d_model} entries")
    axis = None
    f = lp.merge_factor
    if f is not None:
        if not isinstance(f, int) or f < 1 or f & (f - 1):
            raise PlanError(f"merge factor must be a power of two, got {f!r}")
        axis = lp.merge_axis or ("bc" if len(groups) > 1 else "x")
        if axis == "bc":
            if len(groups) % f:
                raise PlanError(f"{len(groups)} BC groups are not divisible by merge factor {f}")
        elif axis == "x":
            if len(groups) != 1:
                raise PlanError("X-head merging applies to single-group (multi-value) layers only")
            if len(heads) % f:
                raise PlanError(f"{len(heads)} heads are not divisible by merge factor {f}")
        else:
            raise PlanError(f"unknown merge axis {axis!r}")
    return {"heads": heads, "groups": groups, "states": states, "chans": chans, "axis": axis}


def _pool(a: np.ndarray, f: int, axis: int, how: str) -> np.ndarray:
    """Reduce runs of ``f`` consecutive blocks along ``axis`` (blocks already grouped)."""
    a = np.moveaxis(a, axis, 0)
    a = a.reshape((a.shape[0] // f, f) + a.shape[1:])
    r = a.mean(axis=1) if how == "mean" else a.sum(axis=1)
    return np.moveaxis(r, 0, axis)


def _apply_layer(blk: BlockParams, bd: BlockDims, lp: LayerPlan, force_bias: bool) -> tuple:
    r = _resolve_layer(lp, bd)
    hv = HeadView(bd)
    ts = {k: v.data.astype(np.float64) for k, v in blk.tensors().items()}

    if lp.masks:
        for comp, flat in lp.masks.items():
            if comp not in ts:
                raise PlanError(f"mask targets missing component {comp!r}")
            arr = ts[comp].reshape(-1).copy()
            idx = np.asarray(flat, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= arr.size):
                raise PlanError(f"mask index out of range for {comp}")
            arr[idx] = 0.0
            ts[comp] = arr.reshape(ts[comp].shape)

    if lp.out_bias_delta is not None or force_bias:
        bias = ts.get("out_proj.bias", np.zeros(bd.d_model))
        if lp.out_bias_delta is not None:
            bias = bias + np.asarray(lp.out_bias_delta, dtype=np.float64)
        ts["out_proj.bias"] = bias

    heads, groups, states, chans = r["heads"], r["groups"], r["states"], r["chans"]
    z_cols = [hv.z_cols(h)[p] for h in heads for p in chans[h]]
    x_cols = [hv.x_cols(h)[p] for h in heads for p in chans[h]]
    b_cols = [hv.b_cols(g)[n] for g in groups for n in states[g]]
    c_cols = [hv.c_cols(g)[n] for g in groups for n in states[g]]
    dt_cols = [hv.dt_col(h)[0] for h in heads]
    cols = z_cols + x_cols + b_cols + c_cols + dt_cols
    conv = [c - hv.x_off for c in x_cols + b_cols + c_cols]
    inner = [hv.out_rows(h)[p] for h in heads for p in chans[h]]

    ts["in_proj.weight"] = ts["in_proj.weight"][:, cols]
    ts["conv1d.weight"] = ts["conv1d.weight"][conv]
    ts["conv1d.bias"] = ts["conv1d.bias"][conv]
    for k in ("A_log", "D", "dt_bias"):
        ts[k] = ts[k][heads]
    ts["norm.weight"] = ts["norm.weight"][inner]
    ts["out_proj.weight"] = ts["out_proj.weight"][inner]

    H2, G2 = len(heads), len(groups)
    P2, N2 = len(chans[heads[0]]), len(states[groups[0]])
    f, axis = lp.merge_factor, r["axis"]
    if f and f > 1:
        W = ts["in_proj.weight"]
        zc, xc = W[:, : H2 * P2], W[:, H2 * P2 : 2 * H2 * P2]
        bc, cc = W[:, 2 * H2 * P2 : 2 * H2 * P2 + G2 * N2], W[:, 2 * H2 * P2 + G2 * N2 : 2 * H2 * P2 + 2 * G2 * N2]
        dtc = W[:, 2 * H2 * P2 + 2 * G2 * N2 :]
        cw, cb = ts["conv1d.weight"], ts["conv1d.bias"]
        cx, cB, cC = cw[: H2 * P2], cw[H2 * P2 : H2 * P2 + G2 * N2], cw[H2 * P2 + G2 * N2 :]
        bx, bB, bC = cb[: H2 * P2], cb[H2 * P2 : H2 * P2 + G2 * N2], cb[H2 * P2 + G2 * N2 :]
        d = bd.d_model
        if axis == "bc":
            bc = _pool(bc.reshape(d, G2, N2), f, 1, "mean").reshape(d, -1)
            cc = _pool(cc.reshape(d, G2, N2), f, 1, "mean").reshape(d, -1)
            cB = _pool(cB.reshape(G2, N2, -1), f, 0, "mean").reshape(-1, cw.shape[1])
            cC = _pool(cC.reshape(G2, N2, -1), f, 0, "mean").reshape(-1, cw.shape[1])
            bB = _pool(bB.reshape(G2, N2), f, 0, "mean").reshape(-1)
            bC = _pool(bC.reshape(G2, N2), f, 0, "mean").reshape(-1)
            G2 //= f
        else:
            zc = _pool(zc.reshape(d, H2, P2), f, 1, "mean").reshape(d, -1)
            xc = _pool(xc.reshape(d, H2, P2), f, 1, "mean").reshape(d, -1)
            dtc = _pool(dtc, f, 1, "mean")
            cx = _pool(cx.reshape(H2, P2, -1), f, 0, "mean").reshape(-1, cw.shape[1])
            bx = _pool(bx.reshape(H2, P2), f, 0, "mean").reshape(-1)
            for k in ("A_log", "D", "dt_bias"):
                ts[k] = _pool(ts[k], f, 0, "mean")
            ts["norm.weight"] = _pool(ts["norm.weight"].reshape(H2, P2), f, 0, "mean").reshape(-1)
            ts["out_proj.weight"] = _pool(ts["out_proj.weight"].reshape(H2, P2, d), f, 0, "sum").reshape(-1, d)
            H2 //= f
        ts["in_proj.weight"] = np.concatenate([zc, xc, bc, cc, dtc], axis=1)
        ts["conv1d.weight"] = np.concatenate([cx, cB, cC], axis=0)
        ts["conv1d.bias"] = np.concatenate([bx, bB, bC])
    new = block_from_tensors({k: Tensor(v) for k, v in ts.items()})
    return new, H2, G2, P2, N2


def apply_plan(model: Model, plan: PrunePlan) -> Model:
    """Materialise a pruned copy of ``model``; the input is never modified."""
    dims = model.dims
    if len(plan.layers) != dims.n_layers:
        raise PlanError(f"plan has {len(plan.layers)} layers, model has {dims.n_layers}")
    force_bias = dims.out_bias or any(lp.out_bias_delta is not None for lp in plan.layers)
    layers, heads, groups, pdims, ndims = [], [], [], set(), set()
    for i, (blk, lp) in enumerate(zip(model.params.layers, plan.layers)):
        try:
            new, h, g, p, n = _apply_layer(blk, dims.block(i), lp, force_bias)
        except PlanError as e:
            raise PlanError(f"layer {i}: {e}") from e
        layers.append(new)
        heads.append(h)
        groups.append(g)
        pdims.add(p)
        ndims.add(n)
    if len(pdims) != 1 or len(ndims) != 1:
        raise PlanError("head_dim and d_state must stay uniform across layers")
    P = pdims.pop()
    # the norm divisor stays at the original head_dim once channels are removed
    norm_div = dims.norm_div if P == dims.head_dim else dims.effective_norm_div
    new_dims = dims.with_layers(heads, groups, head_dim=P, d_state=ndims.pop(), norm_div=norm_div, out_bias=force_bias)
    params = ModelParams(
        embedding=Tensor(model.params.embedding.data), norm_f=Tensor(model.params.norm_f.data), layers=tuple(layers)
    )
    return Model(new_dims, params)


def _compose_lists(a: Optional[list], b: Optional[list]) -> Optional[list]:
    if a is None:
        return b
    if b is None:
        return a
    return [a[j] for j in b]


def compose_plans(first: PrunePlan, second: PrunePlan, dims: ModelDims) -> PrunePlan:
    """Single plan equivalent to applying ``first`` then ``second``.

    Only index selections compose; merges, masks or bias updates in ``first``
    would change the meaning of ``second``'s indices.
    """
    if len(first.layers) != len(second.layers):
        raise PlanError("plans cover different layer counts")
    out = []
    for i, (a, b) in enumerate(zip(first.layers, second.layers)):
        if a.merge_factor or a.masks or a.out_bias_delta is not None:
            raise PlanError(f"layer {i}: first plan must contain index selections only")
        if b.masks or b.out_bias_delta is not None:
            raise PlanError(f"layer {i}: second plan may not carry masks or bias updates")
        bd = dims.block(i)
        r = _resolve_layer(a, bd)
        heads = _compose_lists(a.keep_heads, b.keep_heads)
        groups = _compose_lists(a.keep_groups, b.keep_groups)
        states = a.keep_states
        if b.keep_states is not None:
            width = len(b.keep_states[0])
            states = [list(r["states"][g][:width]) for g in range(bd.n_groups)]
            for j, g in enumerate(r["groups"]):
                states[g] = [r["states"][g][k] for k in b.keep_states[j]]
        chans = a.keep_headdim
        if b.keep_headdim is not None:
            width = len(b.keep_headdim[0])
            chans = [list(r["chans"][h][:width]) for h in range(bd.n_heads)]
            for j, h in enumerate(r["heads"]):
                chans[h] = [r["chans"][h][k] for k in b.keep_headdim[j]]
        out.append(
            LayerPlan(
                keep_heads=heads,
                keep_groups=groups,
                keep_states=states,
                keep_headdim=chans,
                merge_factor=b.merge_factor,
                merge_axis=b.merge_axis,
            )
        )
    return PrunePlan(f"{first.method}+{second.method}", out, sorted(set(first.targets) | set(second.targets)))


# --------------------------------------------------------------------------
# WANDA
# --------------------------------------------------------------------------


def _floor_count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + _EPS))


def _keep_count(ratio: float, n: int) -> int:
    return int(math.ceil((1.0 - ratio) * n - _EPS))


def _check_ratio(ratio: float) -> float:
    ratio = float(ratio)
    if not 0.0 <= ratio <= 1.0:
        raise PlanError(f"ratio must lie in [0, 1], got {ratio}")
    return ratio


def wanda_mask(S: np.ndarray, ratio: float, grouping: str = "output") -> np.ndarray:
    """Boolean prune mask: the ``floor(ratio * n)`` lowest scores of every group.

    ``output`` groups are columns of an input-major weight (one per output
    unit); ``row`` groups are rows.
    """
    ratio = _check_ratio(ratio)
    S = np.asarray(S, dtype=np.float64)
    if grouping == "output":
        return wanda_mask(S.T, ratio, "row").T
    if grouping != "row":
        raise ValueError(f"grouping must be 'output' or 'row', got {grouping!r}")
    n = S.shape[1]
    k = _floor_count(ratio, n)
    mask = np.zeros(S.shape, dtype=bool)
    if k == 0:
        return mask
    # stable sort over reversed columns: equal scores prune the higher index first
    order = n - 1 - np.argsort(S[:, ::-1], axis=1, kind="stable")
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def wanda_apply(W: Tensor, S: Tensor, ratio: float, grouping: str = "output") -> Tensor:
    if S.shape != W.shape:
        raise PlanError(f"score shape {list(S.shape)} != weight shape {list(W.shape)}")
    mask = wanda_mask(S.data, ratio, grouping)
    return Tensor(np.where(mask, np.float32(0.0), W.data))


_TARGET_COMPONENT = {
    "in_proj": "in_proj.weight",
    "out_proj": "out_proj.weight",
    "mlp.gate": "mlp.gate.weight",
    "mlp.up": "mlp.up.weight",
    "mlp.down": "mlp.down.weight",
}


def _kind(layer_name: str) -> str:
    rest = layer_name.split(".", 2)[2]
    return "mlp" if rest.startswith("mlp.") else rest


def plan_wanda(model: Model, stats: ActivationStats, ratio: Union[float, dict], targets=None) -> PrunePlan:
    """Unstructured masks for every targeted linear layer.

    ``ratio`` may be a dict keyed by target kind (``in_proj``, ``out_proj``,
    ``mlp``) to prune kinds at different rates.
    """
    names = resolve_targets(model, targets)
    layers = [LayerPlan() for _ in model.params.layers]
    for name in names:
        r = ratio.get(_kind(name), 0.0) if isinstance(ratio, dict) else ratio
        r = _check_ratio(r)
        i = int(name.split(".")[1])
        comp = _TARGET_COMPONENT[name.split(".", 2)[2]]
        W = model.params.layers[i].tensors()[comp]
        if name not in stats:
            raise CalibrationError(f"no activation statistics for {name}")
        mask = wanda_mask(wanda_scores(W, stats[name].feature_l2).data, r)
        if mask.any():
            layers[i].masks = layers[i].masks or {}
            layers[i].masks[comp] = np.flatnonzero(mask).tolist()
    return PrunePlan("wanda", layers, list(targets) if targets is not None else ["all"])


def masked_count(plan: PrunePlan) -> int:
    return sum(len(v) for lp in plan.layers if lp.masks for v in lp.masks.values())


def wanda_prune(model: Model, stats: ActivationStats, ratio, targets=None) -> tuple[Model, PrunePlan, PruneReport]:
    plan = plan_wanda(model, stats, ratio, targets)
    pruned = apply_plan(model, plan)
    report = compression_report(model.dims, pruned.dims)
    report.sparsity = masked_count(plan) / model_params(model.dims)
    return pruned, plan, report


# --------------------------------------------------------------------------
# structured plans
# --------------------------------------------------------------------------


def top_indices(scores: np.ndarray, k: int) -> list:
    """Indices of the ``k`` largest scores (ties favour lower index), ascending."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:k])


def _channel_plan(scores: ImportanceScores, ratio: float, dims: ModelDims, granularity: str, method: str) -> PrunePlan:
    ratio = _check_ratio(ratio)
    if scores.granularity != granularity:
        raise PlanError(f"{method} pruning needs {granularity} scores, got {scores.granularity}")
    layers = []
    for i in range(dims.n_layers):
        key = f"layers.{i}"
        if key not in scores.scores:
            raise PlanError(f"scores missing layer {i}")
        s = np.asarray(scores.scores[key])
        bd = dims.block(i)
        want = (bd.n_groups, bd.d_state) if granularity == "per_state_channel" else (bd.n_heads, bd.head_dim)
        if s.shape != want:
            raise PlanError(f"layer {i}: scores shape {list(s.shape)} != {list(want)}")
        k = _keep_count(ratio, s.shape[1])
        if k < 1:
            raise PlanError(f"ratio {ratio} would leave zero channels per {'group' if method == 'state' else 'head'}")
        if k == s.shape[1]:
            layers.append(LayerPlan())
            continue
        keep = [top_indices(row, k) for row in s]
        layers.append(LayerPlan(keep_states=keep) if method == "state" else LayerPlan(keep_headdim=keep))
    return PrunePlan(method, layers)


def plan_state_pruning(scores: ImportanceScores, ratio: float, dims: ModelDims) -> PrunePlan:
    """Keep the top ``ceil((1 - ratio) * N)`` state channels of every BC group."""
    return _channel_plan(scores, ratio, dims, "per_state_channel", "state")


def plan_headdim_pruning(scores: ImportanceScores, ratio: float, dims: ModelDims) -> PrunePlan:
    """Keep the top ``ceil((1 - ratio) * P)`` channels of every head."""
    return _channel_plan(scores, ratio, dims, "per_headdim_channel", "headdim")


def plan_merge(dims: ModelDims, factor: int, axis: Optional[str] = None) -> PrunePlan:
    """Mean-pool consecutive BC groups (G > 1) or value heads (G == 1)."""
    if not isinstance(factor, int) or factor < 1 or factor & (factor - 1):
        raise PlanError(f"merge factor must be a power of two >= 1, got {factor!r}")
    layers = []
    for i in range(dims.n_layers):
        bd = dims.block(i)
        ax = axis or ("bc" if bd.n_groups > 1 else "x")
        lp = LayerPlan(merge_factor=factor, merge_axis=ax)
        _resolve_layer(lp, bd)
        layers.append(lp)
    return PrunePlan("merge", layers)


def merge_heads(model: Model, factor: int, axis: Optional[str] = None) -> tuple[Model, PrunePlan, PruneReport]:
    plan = plan_merge(model.dims, factor, axis)
    merged = apply_plan(model, plan)
    return merged, plan, compression_report(model.dims, merged.dims)


def structured_prune(model: Model, plan: PrunePlan) -> tuple[Model, PruneReport]:
    pruned = apply_plan(model, plan)
    return pruned, compression_report(model.dims, pruned.dims)


# --------------------------------------------------------------------------
# SSM-FLAP
# --------------------------------------------------------------------------


def _head_cost(bd: BlockDims) -> int:
    """Parameters freed by removing one value head (plus its BC group in MHA layers)."""
    P, N, d, K = bd.head_dim, bd.d_state, bd.d_model, bd.d_conv
    cost = d * (2 * P + 1) + P * (K + 1) + 3 + P + P * d
    if bd.head_pattern == "MHA":
        cost += d * 2 * N + 2 * N * (K + 1)
    return cost


def plan_flap(model: Model, stats: ActivationStats, target_ratio: float) -> PrunePlan:
    """Global head removal ranked by per-layer standardized fluctuation.

    Heads leave in ascending order of (standardized score, raw score) until the
    freed parameters reach ``target_ratio`` of the SSM component.  Layers never
    drop below one head per BC group; GVA layers then round their kept count
    up to a multiple of the group count and keep the best heads per group.
    """
    target_ratio = _check_ratio(target_ratio)
    dims = model.dims
    plan = PrunePlan("flap", [LayerPlan() for _ in range(dims.n_layers)])
    if target_ratio == 0.0:
        return plan
    raw, std, views = [], [], []
    for i, blk in enumerate(model.params.layers):
        name = f"layers.{i}.out_proj"
        if name not in stats:
            raise CalibrationError(f"flap needs out_proj input statistics for layer {i}")
        hv = HeadView(dims.block(i))
        r, z = flap_head_scores(stats[name], blk.out_proj, hv)
        raw.append(r)
        std.append(z)
        views.append(hv)

    budget = target_ratio * ssm_params(dims)
    cand = [(std[i][h], raw[i][h], -i, -h) for i in range(dims.n_layers) for h in range(len(raw[i]))]
    cand.sort()
    removed = [set() for _ in range(dims.n_layers)]
    freed = 0
    clamped = set()
    for _, _, ni, nh in cand:
        if freed >= budget:
            break
        i, h = -ni, -nh
        bd = dims.block(i)
        floor = 1 if bd.head_pattern == "MHA" else bd.n_groups
        if bd.n_heads - len(removed[i]) - 1 < floor:
            clamped.add(i)
            continue
        removed[i].add(h)
        freed += _head_cost(bd)
    for i in sorted(clamped):
        plan.notes.append(f"layer {i}: clamped to keep one head per group")

    for i, blk in enumerate(model.params.layers):
        if not removed[i]:
            continue
        bd = dims.block(i)
        H, G = bd.n_heads, bd.n_groups
        if bd.head_pattern == "MHA":
            keep = [h for h in range(H) if h not in removed[i]]
            groups = keep
        else:
            hpg = H // G
            k = H - len(removed[i])
            per = -(-k // G)
            keep = []
            for g in range(G):
                members = list(range(g * hpg, (g + 1) * hpg))
                order = sorted(members, key=lambda h: (-std[i][h], -raw[i][h], h))
                keep += sorted(order[:per])
            groups = None
            if len(keep) == H:
                continue
        gone = [h for h in range(H) if h not in keep]
        rows = [r for h in gone for r in views[i].out_rows(h)]
        mean = stats[f"layers.{i}.out_proj"].feature_mean.data.astype(np.float64)
        W = blk.out_proj.data.astype(np.float64)
        delta = mean[rows] @ W[rows]
        plan.layers[i] = LayerPlan(keep_heads=keep, keep_groups=groups, out_bias_delta=[float(v) for v in delta])
    return plan


def flap_prune(model: Model, stats: ActivationStats, target_ratio: float) -> tuple[Model, PrunePlan, PruneReport]:
    plan = plan_flap(model, stats, target_ratio)
    if plan.is_identity():
        return model, plan, compression_report(model.dims, model.dims)
    pruned = apply_plan(model, plan)
    report = compression_report(model.dims, pruned.dims)
    report.warnings = list(plan.notes)
    return pruned, plan, report
