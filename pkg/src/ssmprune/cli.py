"""Command-line entry point: ``ssmprune <command> ...``.

Every option can also come from the environment as ``SSMPRUNE_<DEST>``
(e.g. ``SSMPRUNE_THREADS=4``); an explicit flag wins.
Exit status: 0 success, 1 usage error, 2 data or contract error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import pruning as P
from .calibration import CalibSet, accumulate_taylor, collect_activation_stats, load_bundle, read_calib, save_bundle, write_calib
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import CalibrationError, PlanError, SSMPruneError
from .eval import EvalReport, perplexity, ratio_sweep, throughput, wanda_component_sweep
from .importance import taylor_group_scores
from .model import PRESETS, Model
from .toy import planted_model, random_model, sample_sequences

ENV_PREFIX = "SSMPRUNE_"
METHODS = ("wanda", "state", "headdim", "merge", "flap")
DEFAULT_RATIOS = (0.0, 0.25, 0.5)
DEFAULT_MERGE_RATIOS = (0.5, 0.75)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ratio(text: str) -> float:
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= r <= 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1], got {r}")
    return r


def _ratio_list(text: str) -> list:
    return [_ratio(t) for t in text.split(",") if t.strip()]


def _targets(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssmprune", description="Structured and unstructured pruning for Mamba-2 models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--report", type=Path, help="write a JSON report here")

    sp = sub.add_parser("init", help="write a seeded random checkpoint")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    sp.add_argument("--planted", action="store_true", help="teacher-planted weights for sensitivity experiments")
    sp.add_argument("--out", type=Path, required=True)
    common(sp)

    sp = sub.add_parser("synth", help="sample a token corpus from a checkpoint")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--n-seq", type=int, default=20)
    sp.add_argument("--seq-len", type=int, default=64)
    sp.add_argument("--out", type=Path, required=True, help=".calb/.bin for binary, anything else for JSONL")
    common(sp)

    sp = sub.add_parser("inspect", help="print dims, head pattern and parameter budget")
    sp.add_argument("checkpoint", type=Path, nargs="?")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    common(sp)

    sp = sub.add_parser("calibrate", help="collect activation statistics and Taylor saliency")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--calib", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--targets", type=_targets, help="comma list of in_proj,out_proj,mlp or layer names")
    sp.add_argument("--no-taylor", action="store_true", help="skip the gradient pass")
    common(sp)

    sp = sub.add_parser("prune", help="prune a checkpoint")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--method", choices=METHODS, help="required unless --from-plan is given")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--from-plan", type=Path, help="replay a saved plan JSON instead of planning")
    sp.add_argument("--stats", type=Path, help="bundle written by calibrate")
    sp.add_argument("--ratio", type=_ratio, default=0.5)
    sp.add_argument("--factor", type=int, default=2, help="merge group size (power of two)")
    sp.add_argument("--axis", choices=("bc", "x"), help="merge axis (default: bc if G > 1 else x)")
    sp.add_argument("--targets", type=_targets, help="wanda target filter")
    sp.add_argument("--plan", type=Path, help="plan JSON path (default: <out>.plan.json)")
    common(sp)

    sp = sub.add_parser("eval", help="perplexity (and optional throughput) of a checkpoint")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--throughput", metavar="BATCH,LEN", help="also time full forward scans")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--baseline", type=Path, help="checkpoint to time for the speedup column")
    common(sp)

    sp = sub.add_parser("sweep", help="perplexity across pruning ratios or target components")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--stats", type=Path)
    sp.add_argument("--kind", choices=("ratio", "component"), default="ratio")
    sp.add_argument("--method", choices=METHODS, default="wanda")
    sp.add_argument("--ratios", type=_ratio_list)
    sp.add_argument("--matched", action="store_true", help="component ratios are whole-model sparsities")
    sp.add_argument("--targets", type=_targets)
    sp.add_argument("--csv", type=Path)
    common(sp)
    return p


def _apply_env(parser: argparse.ArgumentParser, command: str) -> None:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    for act in sub._actions:
        if not act.option_strings or act.dest == "help":
            continue
        raw = os.environ.get(ENV_PREFIX + act.dest.upper())
        if raw is None:
            continue
        if act.const is True and act.nargs == 0:
            act.default = raw.lower() in ("1", "true", "yes")
        else:
            try:
                act.default = act.type(raw) if act.type else raw
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"{ENV_PREFIX}{act.dest.upper()}: {e}") from None


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_stats(args, need_taylor=False, need_act=False):
    if args.stats is None:
        raise CalibrationError(f"method {args.method!r} needs --stats from `ssmprune calibrate`")
    stats, taylor = load_bundle(args.stats)
    if need_act and stats is None:
        raise CalibrationError(f"{args.stats} holds no activation statistics")
    if need_taylor and taylor is None:
        raise CalibrationError(f"{args.stats} holds no Taylor saliency (calibrate without --no-taylor)")
    return stats, taylor


def _inspect_lines(model_dims) -> list:
    fr = P.component_fractions(model_dims)
    d = model_dims
    lines = [
        f"d_model {d.d_model}  layers {d.n_layers}  vocab {d.vocab_size}",
        f"heads {d.n_heads}  head_dim {d.head_dim}  d_state {d.d_state}  groups {d.n_groups}  d_conv {d.d_conv}",
        f"head pattern {d.head_pattern}",
        f"parameters: ssm {P.ssm_params(d)}  model {P.model_params(d)}",
        "ssm fractions: " + "  ".join(f"{k} {100 * v:.2f}%" for k, v in fr.items()),
    ]
    if d.head_counts:
        lines.append("per-layer heads " + ",".join(map(str, d.head_counts)))
        lines.append("per-layer groups " + ",".join(map(str, d.group_counts)))
    if d.has_mlp:
        lines.append(f"mlp width {d.d_mlp}")
    return lines


def cmd_init(args) -> None:
    dims = PRESETS[args.preset]
    model = planted_model(args.seed, dims) if args.planted else random_model(dims, seed=args.seed)
    write_checkpoint(args.out, model)


def cmd_synth(args) -> None:
    model = read_checkpoint(args.model)
    if args.n_seq < 1 or args.seq_len < 2:
        raise CalibrationError("synth needs --n-seq >= 1 and --seq-len >= 2")
    write_calib(args.out, CalibSet(sample_sequences(model, args.n_seq, args.seq_len, seed=args.seed), str(args.model)))


def cmd_inspect(args) -> None:
    if (args.checkpoint is None) == (args.preset is None):
        raise UsageError("inspect: give exactly one of a checkpoint path or --preset")
    dims = PRESETS[args.preset] if args.preset else read_checkpoint(args.checkpoint).dims
    for line in _inspect_lines(dims):
        print(line)
    if args.report:
        body = {"dims": dims.to_dict(), "head_pattern": dims.head_pattern, "fractions": P.component_fractions(dims),
                "ssm_params": P.ssm_params(dims), "model_params": P.model_params(dims)}
        _write(args.report, json.dumps(body, sort_keys=True, indent=1))


def cmd_calibrate(args) -> None:
    model = read_checkpoint(args.model)
    calib = read_calib(args.calib)
    stats = collect_activation_stats(model, calib, args.targets, threads=args.threads)
    taylor = None if args.no_taylor else accumulate_taylor(model, calib, threads=args.threads)
    save_bundle(args.out, stats, taylor)


def _replay(model: Model, path: Path):
    try:
        plan = P.PrunePlan.from_json(path.read_text())
    except OSError as e:
        raise PlanError(f"cannot read plan {path}: {e}") from None
    pruned = P.apply_plan(model, plan)
    report = P.compression_report(model.dims, pruned.dims)
    if P.masked_count(plan):
        report.sparsity = P.masked_count(plan) / P.model_params(model.dims)
    report.warnings = list(plan.notes)
    return pruned, plan, report


def _prune(model: Model, args):
    if args.from_plan is not None:
        return _replay(model, args.from_plan)
    m = args.method
    if m is None:
        raise UsageError("prune needs --method or --from-plan")
    if m == "merge":
        return P.merge_heads(model, args.factor, args.axis)
    if m == "wanda":
        stats, _ = _load_stats(args, need_act=True)
        return P.wanda_prune(model, stats, args.ratio, args.targets)
    if m == "flap":
        stats, _ = _load_stats(args, need_act=True)
        return P.flap_prune(model, stats, args.ratio)
    _, taylor = _load_stats(args, need_taylor=True)
    if m == "state":
        plan = P.plan_state_pruning(taylor_group_scores(taylor, model.dims, "state_channel"), args.ratio, model.dims)
    else:
        plan = P.plan_headdim_pruning(taylor_group_scores(taylor, model.dims, "headdim_channel"), args.ratio, model.dims)
    pruned, report = P.structured_prune(model, plan)
    return pruned, plan, report


def cmd_prune(args) -> None:
    model = read_checkpoint(args.model)
    pruned, plan, report = _prune(model, args)
    write_checkpoint(args.out, pruned)
    _write(args.plan or args.out.with_name(args.out.name + ".plan.json"), plan.to_json())
    _write(args.report or args.out.with_name(args.out.name + ".report.json"), report.to_json())
    print(f"{args.method}: ssm compression {100 * report.ssm_compression:.2f}%  whole-model sparsity {100 * report.sparsity:.2f}%")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_eval(args) -> None:
    model = read_checkpoint(args.model)
    data = read_calib(args.data)
    ppl, n = perplexity(model, data, threads=args.threads)
    report = EvalReport(perplexity=ppl, token_count=n)
    if args.throughput:
        try:
            batch, seq_len = (int(v) for v in args.throughput.split(","))
        except ValueError:
            raise UsageError("--throughput expects BATCH,LEN") from None
        base = None
        if args.baseline:
            base = throughput(read_checkpoint(args.baseline), batch, seq_len, args.repeats, seed=args.seed)
            report.throughput.append(dict(base, model=str(args.baseline)))
        row = throughput(model, batch, seq_len, args.repeats, baseline=base and base["tokens_per_s"], seed=args.seed)
        report.throughput.append(dict(row, model=str(args.model)))
    print(f"perplexity {ppl:.6f} over {n} tokens")
    if args.report:
        _write(args.report, report.to_json())


def _sweep_prune(args, stats, taylor):
    m = args.method
    if m == "wanda":
        return lambda model, r: P.wanda_prune(model, stats, r, args.targets)
    if m == "flap":
        return lambda model, r: P.flap_prune(model, stats, r)
    if m == "merge":

        def merge(model, r):
            if r == 0.0:
                return model, P.identity_plan(model.dims), P.compression_report(model.dims, model.dims)
            f = round(1.0 / (1.0 - r)) if r < 1.0 else 0
            if f < 2 or f & (f - 1) or abs(1.0 - 1.0 / f - r) > 1e-9:
                raise PlanError(f"merge ratio {r} is not 1 - 1/2^k")
            return P.merge_heads(model, f, args.axis if hasattr(args, "axis") else None)

        return merge
    axis = "state_channel" if m == "state" else "headdim_channel"

    def structured(model, r):
        scores = taylor_group_scores(taylor, model.dims, axis)
        plan = (P.plan_state_pruning if m == "state" else P.plan_headdim_pruning)(scores, r, model.dims)
        pruned, report = P.structured_prune(model, plan)
        return pruned, plan, report

    return structured


def cmd_sweep(args) -> None:
    model = read_checkpoint(args.model)
    data = read_calib(args.data)
    report = EvalReport()
    report.perplexity, report.token_count = perplexity(model, data, threads=args.threads)
    if args.kind == "component":
        stats, _ = _load_stats(argparse.Namespace(**{**vars(args), "method": "wanda"}), need_act=True)
        ratios = args.ratios or ([0.05, 0.1, 0.15] if args.matched else list(DEFAULT_RATIOS))
        targets = args.targets or ["in_proj", "out_proj", "both"]
        report.component = wanda_component_sweep(model, stats, data, ratios, targets, args.matched, args.threads)
        rows = report.component
    else:
        stats = taylor = None
        if args.method != "merge":
            stats, taylor = _load_stats(args, need_act=args.method in ("wanda", "flap"), need_taylor=args.method in ("state", "headdim"))
        ratios = args.ratios or list(DEFAULT_MERGE_RATIOS if args.method == "merge" else DEFAULT_RATIOS)
        report.sweep = ratio_sweep(model, data, ratios, _sweep_prune(args, stats, taylor), args.threads)
        rows = report.sweep
    for r in rows:
        tag = r.get("target", args.method)
        flag = "  (non-monotone)" if r.get("non_monotone") else ""
        print(f"{tag:>8} ratio {r['ratio']:.4f}  sparsity {r['sparsity']:.4f}  perplexity {r['perplexity']:.6f}{flag}")
    if args.report:
        _write(args.report, report.to_json())
    if args.csv:
        _write(args.csv, report.to_csv())


COMMANDS = {
    "init": cmd_init,
    "synth": cmd_synth,
    "inspect": cmd_inspect,
    "calibrate": cmd_calibrate,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        cmd = next((a for a in argv if not a.startswith("-")), None)
        if cmd in COMMANDS:
            _apply_env(parser, cmd)
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except SSMPruneError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


run = main


if __name__ == "__main__":
    sys.exit(main())
