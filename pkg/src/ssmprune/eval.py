"""Perplexity, throughput, and pruning sweeps."""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .calibration import ActivationStats, CalibSet, resolve_targets
from .errors import CalibrationError, NumericError, PlanError
from .model import Model, model_forward
from .parallel import parallel_map
from .pruning import model_params, wanda_prune

SCAN_NOTE = "throughput uses full-sequence scans without an incremental cache"


def sequence_nll(model: Model, seq: Sequence[int]) -> tuple[float, int]:
    """Summed next-token NLL (fp64) and the number of predicted tokens."""
    if len(seq) < 2:
        return 0.0, 0
    logits = model_forward(model, seq[:-1]).data.astype(np.float64)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits during evaluation")
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    tgt = np.asarray(seq[1:], dtype=np.int64)
    return float((lse - logits[np.arange(len(tgt)), tgt]).sum()), len(tgt)


def perplexity(model: Model, data: CalibSet, threads: int = 1) -> tuple[float, int]:
    """``exp`` of the mean next-token NLL over every predicted token; returns (ppl, count)."""
    if len(data) == 0:
        raise CalibrationError("perplexity needs at least one sequence")
    data.check_vocab(model.dims.vocab_size)
    parts = parallel_map(lambda s: sequence_nll(model, s), data.sequences, threads)
    total = sum(p[0] for p in parts)
    n = sum(p[1] for p in parts)
    if n == 0:
        raise CalibrationError("no sequence has a token to predict (all shorter than 2)")
    return float(np.exp(total / n)), n


# --------------------------------------------------------------------------
# throughput
# --------------------------------------------------------------------------


def throughput(
    model: Model,
    batch: int,
    seq_len: int,
    repeats: int = 3,
    baseline: Optional[float] = None,
    forward: Optional[Callable[[Model, np.ndarray], object]] = None,
    seed: int = 0,
) -> dict:
    """Median tokens/s of full forward scans over a random ``[batch, seq_len]`` batch."""
    if repeats < 3:
        raise ValueError("throughput needs repeats >= 3")
    if batch < 1 or seq_len < 1:
        raise ValueError("batch and seq_len must be positive")
    ids = np.random.default_rng(seed).integers(0, model.dims.vocab_size, (batch, seq_len))
    if forward is None:

        def forward(m, x):
            for row in x:
                model_forward(m, row)

    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward(model, ids)
        dt = max(time.perf_counter() - t0, 1e-12)
        rates.append(batch * seq_len / dt)
    tps = statistics.median(rates)
    return {
        "batch": batch,
        "seq_len": seq_len,
        "tokens_per_s": tps,
        "speedup": tps / baseline if baseline else None,
    }


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


COMPONENT_TARGETS = {"in_proj": ["in_proj"], "out_proj": ["out_proj"], "both": ["in_proj", "out_proj"]}


def _group_shapes(model: Model, targets) -> list:
    """``(group_size, n_groups)`` of every targeted weight under per-output grouping."""
    p = model.params.layers
    pick = {"in_proj": "in_proj", "out_proj": "out_proj", "mlp.gate": "mlp_gate", "mlp.up": "mlp_up", "mlp.down": "mlp_down"}
    out = []
    for name in resolve_targets(model, targets):
        i, rest = int(name.split(".")[1]), name.split(".", 2)[2]
        out.append(getattr(p[i], pick[rest]).shape)
    return out


def target_params(model: Model, targets) -> int:
    return sum(a * b for a, b in _group_shapes(model, targets))


def sparsity_brackets(model: Model, targets, sparsity: float) -> tuple[tuple, tuple]:
    """Achievable ``(ratio, sparsity)`` pairs just below and above ``sparsity``.

    Per-group floors make whole-model sparsity a step function of the layer
    ratio; the breakpoints are ``k / group_size``.  Both entries coincide when
    ``sparsity`` is exactly achievable.
    """
    total = model_params(model.dims)
    shapes = _group_shapes(model, targets)
    if sparsity * total > sum(a * b for a, b in shapes) + 1e-9:
        raise PlanError(f"whole-model sparsity {sparsity} is out of reach when pruning only {targets}")
    pts = {}
    for r in sorted({k / n for n, _ in shapes for k in range(n + 1)}):
        s = sum(int(np.floor(r * n + 1e-9)) * m for n, m in shapes) / total
        pts.setdefault(s, r)
    levels = sorted(pts)
    lo = max(s for s in levels if s <= sparsity + 1e-12)
    hi = min(s for s in levels if s >= sparsity - 1e-12)
    return (pts[lo], lo), (pts[hi], hi)


def ratio_for_sparsity(model: Model, targets, sparsity: float) -> float:
    """Layer ratio of the achievable sparsity nearest ``sparsity`` (ties to the lower)."""
    (rl, sl), (rh, sh) = sparsity_brackets(model, targets, sparsity)
    return rl if sparsity - sl <= sh - sparsity else rh


def wanda_component_sweep(
    model: Model,
    stats: ActivationStats,
    data: CalibSet,
    ratios: Sequence[float],
    targets: Sequence[str] = ("in_proj", "out_proj", "both"),
    matched: bool = False,
    threads: int = 1,
) -> list[dict]:
    """Perplexity after WANDA on each target set.

    Without ``matched`` the ``ratios`` are per-layer ratios.  With ``matched``
    they are whole-model sparsities: the two achievable sparsities bracketing
    each request are both evaluated and perplexity is interpolated linearly
    between them, so every target is compared at exactly the same sparsity.
    """
    cells = [(t, r) for t in targets for r in ratios]

    def measure(kinds, layer_ratio):
        pruned, _, rep = wanda_prune(model, stats, layer_ratio, kinds)
        return perplexity(pruned, data)[0], rep.sparsity

    def run(cell):
        t, r = cell
        kinds = COMPONENT_TARGETS[t]
        if not matched:
            ppl, sp = measure(kinds, r)
            return {"target": t, "ratio": float(r), "perplexity": ppl, "sparsity": sp}
        (rl, _), (rh, _) = sparsity_brackets(model, kinds, r)
        pl, sl = measure(kinds, rl)
        ph, sh = (pl, sl) if rh == rl else measure(kinds, rh)
        w = 0.0 if sh == sl else (r - sl) / (sh - sl)
        return {
            "target": t,
            "ratio": float(rl + w * (rh - rl)),
            "perplexity": float(pl + w * (ph - pl)),
            "sparsity": float(r),
            "bracket_ratio": [float(rl), float(rh)],
            "bracket_sparsity": [sl, sh],
            "bracket_perplexity": [pl, ph],
        }

    return parallel_map(run, cells, threads)


def ratio_sweep(
    model: Model,
    data: CalibSet,
    ratios: Sequence[float],
    prune: Callable[[Model, float], tuple],
    threads: int = 1,
) -> list[dict]:
    """Perplexity per ratio for any ``prune(model, ratio) -> (model', plan, report)``.

    ``non_monotone`` flags a ratio whose perplexity dips below the previous one.
    """
    ratios = [float(r) for r in ratios]
    if ratios != sorted(ratios):
        raise ValueError("sweep ratios must be sorted ascending")

    def run(r):
        pruned, _, rep = prune(model, r)
        ppl, _ = perplexity(pruned, data)
        return {"ratio": r, "perplexity": ppl, "sparsity": rep.sparsity, "ssm_compression": rep.ssm_compression}

    rows = parallel_map(run, ratios, threads)
    for j, row in enumerate(rows):
        row["non_monotone"] = j > 0 and row["perplexity"] < rows[j - 1]["perplexity"]
    return rows


def wanda_sweep_fn(stats: ActivationStats, targets=None) -> Callable:
    return lambda m, r: wanda_prune(m, stats, r, targets)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    perplexity: Optional[float] = None
    token_count: int = 0
    sweep: list = field(default_factory=list)
    throughput: list = field(default_factory=list)
    component: list = field(default_factory=list)
    notes: list = field(default_factory=lambda: [SCAN_NOTE])

    def __post_init__(self):
        if self.perplexity is not None and not self.perplexity >= 1.0:
            raise NumericError(f"perplexity {self.perplexity} is below 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        """Flat table of every sweep and component row, for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "target", "ratio", "perplexity", "sparsity"])
        for r in self.sweep:
            w.writerow(["sweep", "", repr(r["ratio"]), repr(r["perplexity"]), repr(r["sparsity"])])
        for r in self.component:
            w.writerow(["component", r["target"], repr(r["ratio"]), repr(r["perplexity"]), repr(r["sparsity"])])
        return buf.getvalue()
