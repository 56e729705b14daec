"""Saliency scores for the three scoring families (WANDA, Taylor, FLAP)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .calibration import ActivationStats, LayerStats, TaylorAccumulator
from .errors import CalibrationError, DimensionError
from .model import HeadView, ModelDims
from .tensor import Tensor

GRANULARITIES = ("per_weight", "per_state_channel", "per_headdim_channel", "per_head")


@dataclass
class ImportanceScores:
    granularity: str
    scores: dict = field(default_factory=dict)  # layer key -> float64 array
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    def to_json(self) -> str:
        body = {
            "granularity": self.granularity,
            "metadata": self.metadata,
            "scores": {k: np.asarray(v).tolist() for k, v in sorted(self.scores.items())},
        }
        return json.dumps(body, sort_keys=True, indent=1)


def wanda_scores(W: Tensor, feature_l2: Tensor) -> Tensor:
    """``|W[i, j]| * ||X_i||`` for ``W`` stored input-major (rows = input features)."""
    if len(W.shape) != 2 or feature_l2.shape != (W.shape[0],):
        raise DimensionError(f"wanda: feature norm {list(feature_l2.shape)} vs weight {list(W.shape)} (rows = inputs)")
    s = np.abs(W.data.astype(np.float64)) * feature_l2.data.astype(np.float64)[:, None]
    return Tensor(s)


def taylor_group_scores(acc: TaylorAccumulator, dims: ModelDims, axis: str) -> ImportanceScores:
    """Average accumulated ``(g*w)^2`` over each structural channel's in_proj columns.

    ``state_channel``: one score per (group, state) from the B and C columns.
    ``headdim_channel``: one score per (head, channel) from the x and z columns.
    Keys are ``layers.{i}``; values have shape ``[G, N]`` or ``[H, P]``.
    """
    if axis not in ("state_channel", "headdim_channel"):
        raise ValueError(f"axis must be state_channel or headdim_channel, got {axis!r}")
    out = ImportanceScores("per_" + axis, metadata={"method": "taylor", "passes": acc.passes})
    for i in range(dims.n_layers):
        bd = dims.block(i)
        hv = HeadView(bd)
        a = acc[f"layers.{i}.in_proj.weight"]
        if a.shape != (bd.d_model, bd.in_proj_width):
            raise DimensionError(f"layer {i}: accumulator shape {list(a.shape)} does not match dims")
        if axis == "state_channel":
            s = np.empty((bd.n_groups, bd.d_state))
            for g in range(bd.n_groups):
                b = a[:, list(hv.b_cols(g))]
                c = a[:, list(hv.c_cols(g))]
                s[g] = (b.sum(axis=0) + c.sum(axis=0)) / (2 * bd.d_model)
        else:
            s = np.empty((bd.n_heads, bd.head_dim))
            for h in range(bd.n_heads):
                x = a[:, list(hv.x_cols(h))]
                z = a[:, list(hv.z_cols(h))]
                s[h] = (x.sum(axis=0) + z.sum(axis=0)) / (2 * bd.d_model)
        out.scores[f"layers.{i}"] = s
    return out


def standardize(scores: np.ndarray) -> np.ndarray:
    """Population z-score; a constant vector maps to zeros."""
    s = np.asarray(scores, dtype=np.float64)
    sd = s.std()
    if sd == 0.0 or not np.isfinite(sd):
        return np.zeros_like(s)
    return (s - s.mean()) / sd


def flap_head_scores(stats: LayerStats, W_outproj: Tensor, view: HeadView) -> tuple[np.ndarray, np.ndarray]:
    """Per-head fluctuation ``sum_j var_j * ||W_out[j, :]||^2`` and its z-score within the layer."""
    bd = view.bd
    if stats.feature_var.shape != (bd.d_inner,) or W_outproj.shape != (bd.d_inner, bd.d_model):
        raise DimensionError(
            f"flap: stats width {list(stats.feature_var.shape)} / out_proj {list(W_outproj.shape)} vs d_inner {bd.d_inner}"
        )
    w = W_outproj.data.astype(np.float64)
    chan = stats.feature_var.data.astype(np.float64) * (w * w).sum(axis=1)
    raw = np.array([chan[list(view.out_rows(h))].sum() for h in range(bd.n_heads)])
    return raw, standardize(raw)


def flap_scores(stats: ActivationStats, model) -> ImportanceScores:
    """FLAP head scores for every layer of ``model`` (keys ``layers.{i}``)."""
    raw = ImportanceScores("per_head", metadata={"method": "flap"})
    for i, blk in enumerate(model.params.layers):
        name = f"layers.{i}.out_proj"
        if name not in stats:
            raise CalibrationError(f"flap needs out_proj input statistics for layer {i}")
        r, z = flap_head_scores(stats[name], blk.out_proj, HeadView(model.dims.block(i)))
        raw.scores[f"layers.{i}"] = r
        raw.scores[f"layers.{i}.standardized"] = z
    return raw
