"""Seeded desk-scale models and synthetic corpora.

There is no training loop.  A "teacher-planted" model is a seeded random model
whose LM head is sharpened (``logit_scale``) so its next-token distributions are
far from uniform, and whose out_proj weights carry a gain so the SSM branch, not
the embedding, dominates the residual stream (with a tied head and a weak branch
the model mostly repeats its input token).  Its corpus is sampled from the model
itself, so the dense model is the exact data-generating process and any
perturbation raises the expected cross-entropy, which is what the sensitivity
experiments need.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from .model import BlockParams, Model, ModelDims, ModelParams, PRESETS, model_forward
from .tensor import Tensor


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def random_block(dims: ModelDims, i: int, rng: np.random.Generator, out_gain: float = 1.0) -> BlockParams:
    bd = dims.block(i)
    H, P = bd.n_heads, bd.head_dim
    dt = np.exp(rng.uniform(np.log(1e-2), np.log(2e-1), size=H))
    blk = BlockParams(
        in_proj=Tensor(rng.normal(0.0, 1.0 / np.sqrt(bd.d_model), (bd.d_model, bd.in_proj_width))),
        conv_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(bd.d_conv), (bd.conv_dim, bd.d_conv))),
        conv_b=Tensor(rng.normal(0.0, 0.1, bd.conv_dim)),
        A_log=Tensor(np.log(rng.uniform(1.0, 8.0, H))),
        D=Tensor(rng.uniform(0.5, 1.5, H)),
        dt_bias=Tensor(_inv_softplus(dt)),
        norm_w=Tensor(1.0 + 0.1 * rng.normal(size=H * P)),
        out_proj=Tensor(rng.normal(0.0, out_gain / np.sqrt(H * P), (H * P, bd.d_model))),
        out_bias=Tensor(rng.normal(0.0, 0.1, bd.d_model)) if bd.out_bias else None,
    )
    if bd.has_mlp:
        blk = replace(
            blk,
            mlp_gate=Tensor(rng.normal(0.0, 1.0 / np.sqrt(bd.d_model), (bd.d_model, bd.d_mlp))),
            mlp_up=Tensor(rng.normal(0.0, 1.0 / np.sqrt(bd.d_model), (bd.d_model, bd.d_mlp))),
            mlp_down=Tensor(rng.normal(0.0, 1.0 / np.sqrt(bd.d_mlp), (bd.d_mlp, bd.d_model))),
        )
    return blk


def random_model(dims: ModelDims, seed: int = 0, logit_scale: float = 1.0, out_gain: float = 1.0) -> Model:
    """Seeded random weights.

    ``logit_scale`` multiplies the final norm weight; ``out_gain`` scales every
    out_proj so block outputs can dominate the embedding in the residual.
    """
    rng = np.random.default_rng(seed)
    emb = Tensor(rng.normal(0.0, 1.0, (dims.vocab_size, dims.d_model)))
    layers = tuple(random_block(dims, i, rng, out_gain) for i in range(dims.n_layers))
    norm_f = Tensor(np.full(dims.d_model, logit_scale / np.sqrt(dims.d_model)))
    return Model(dims, ModelParams(embedding=emb, norm_f=norm_f, layers=layers))


def planted_model(
    seed: int = 0, dims: Optional[ModelDims] = None, logit_scale: float = 1.5, out_gain: float = 3.0
) -> Model:
    """Teacher model for the sensitivity experiments (``planted`` preset by default)."""
    return random_model(dims or PRESETS["planted"], seed=seed, logit_scale=logit_scale, out_gain=out_gain)


def sample_sequences(
    model: Model, n_seq: int, seq_len: int, seed: int = 0, temperature: float = 1.0
) -> list[list[int]]:
    """Draw sequences from the model's own next-token distribution.

    Each step re-runs the whole prefix; fine at desk scale.
    """
    rng = np.random.default_rng(seed)
    V = model.dims.vocab_size
    out = []
    for _ in range(n_seq):
        seq = [int(rng.integers(V))]
        while len(seq) < seq_len:
            logits = model_forward(model, seq).data[-1].astype(np.float64) / temperature
            p = np.exp(logits - logits.max())
            p /= p.sum()
            seq.append(int(rng.choice(V, p=p)))
        out.append(seq)
    return out
