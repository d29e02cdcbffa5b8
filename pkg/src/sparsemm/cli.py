"""Command-line front end for the pipeline.

Subcommands cover the full artifact flow: `corpus` and `prefill` generate
synthetic inputs, `chase` turns a corpus into a score file, `allocate` turns
scores into a budget plan, `compress` applies a plan to a prefill trace, and
`bench sweep|rho|mask|cost` runs the packaged experiments from a JSON config.

Every command prints one JSON summary line on success. Contract violations
exit nonzero with a structured {"error", "message"} object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .allocator import (
    AllocationConfig,
    DEFAULT_RHO,
    DEFAULT_WINDOW,
    POLICY_NAMES,
    allocate,
    save_plan,
    load_plan,
)
from .cache import compress_prefill, report_to_csv, report_to_json
from .chaser import (
    aggregate_gqa_scores,
    chase_corpus,
    load_scores,
    save_scores,
    score_file_hash,
)
from .errors import InvalidInputError, SparseMMError
from .simmodel import (
    ModelGeometry,
    PlantedHeadSet,
    build_synthetic_model,
    corpus_digest,
    generate_ocr_samples,
    load_corpus,
    save_corpus,
)

__all__ = ["build_parser", "main"]


def _parse_planted(text: str) -> list[tuple[int, int]]:
    """Parse 'l,h;l,h;...' into (layer, head) pairs."""
    pairs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise InvalidInputError(f"bad planted pair {chunk!r}; expected 'layer,head'")
        pairs.append((int(parts[0]), int(parts[1])))
    if not pairs:
        raise InvalidInputError("planted spec is empty")
    return pairs


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=int, required=True)
    parser.add_argument("--query-heads", type=int, required=True)
    parser.add_argument("--kv-heads", type=int, default=None,
                        help="defaults to --query-heads (multi-head attention)")
    parser.add_argument("--head-dim", type=int, default=64)
    parser.add_argument("--planted", required=True,
                        help="semicolon-separated layer,head pairs, e.g. '0,1;3,4'")
    parser.add_argument("--strength", type=float, default=0.8)
    parser.add_argument("--seed", type=int, default=0)


def _build_model(args: argparse.Namespace):
    geometry = ModelGeometry(
        args.layers,
        args.query_heads,
        args.kv_heads if args.kv_heads is not None else args.query_heads,
        args.head_dim,
    )
    planted = PlantedHeadSet.uniform(_parse_planted(args.planted), args.strength)
    return build_synthetic_model(geometry, planted, args.seed)


def cmd_corpus(args: argparse.Namespace) -> dict:
    model = _build_model(args)
    samples = generate_ocr_samples(model, args.samples, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_corpus(out_dir, samples)
    return {
        "command": "corpus",
        "out_dir": str(out_dir),
        "samples": len(samples),
        "digest": corpus_digest(out_dir),
    }


def cmd_chase(args: argparse.Namespace) -> dict:
    samples = load_corpus(args.corpus)
    scores, skipped = chase_corpus(samples)
    if args.group > 1:
        scores = aggregate_gqa_scores(scores, args.group)
    save_scores(args.out, scores)
    return {
        "command": "chase",
        "out": str(args.out),
        "layers": scores.layers,
        "heads": scores.heads,
        "corpus_tokens": scores.corpus_tokens,
        "tokens_skipped": skipped,
        "hash": score_file_hash(args.out),
    }


def cmd_allocate(args: argparse.Namespace) -> dict:
    scores = None
    layers, heads = args.layers, args.heads
    score_hash = ""
    if args.scores:
        scores = load_scores(args.scores)
        score_hash = score_file_hash(args.scores)
        layers, heads = scores.layers, scores.heads
    if layers is None or heads is None:
        raise InvalidInputError(
            "give --scores, or both --layers and --heads for score-free policies"
        )
    config = AllocationConfig(args.budget, args.window, args.rho)
    plan = allocate(args.policy, config, layers, heads, scores=scores, seed=args.seed)
    if score_hash:
        plan = replace(plan, score_file_hash=score_hash)
    save_plan(args.out, plan)
    return {
        "command": "allocate",
        "out": str(args.out),
        "policy": plan.allocator,
        "total_budget": plan.total_budget,
        "min_budget": int(plan.budgets.min()),
        "max_budget": int(plan.budgets.max()),
    }


def cmd_prefill(args: argparse.Namespace) -> dict:
    model = _build_model(args)
    workload = model.decode_workload(args.prompt_len, args.out_len, args.window)
    payload = {
        "layers": model.geometry.layers,
        "query_heads": model.geometry.query_heads,
        "kv_heads": model.geometry.kv_heads,
        "prompt_len": workload.prompt_len,
        "window": workload.window,
        "window_attention": workload.window_attention.tolist(),
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return {
        "command": "prefill",
        "out": str(args.out),
        "prompt_len": workload.prompt_len,
        "window": workload.window,
    }


def cmd_compress(args: argparse.Namespace) -> dict:
    blob = json.loads(Path(args.trace).read_text())
    attn = np.asarray(blob["window_attention"], dtype=np.float64)
    plan = load_plan(args.plan)
    window = int(blob["window"])
    if plan.window != window:
        raise InvalidInputError(
            f"plan window {plan.window} does not match trace window {window}"
        )
    cache, report = compress_prefill(attn, plan, window)
    if args.out_json:
        report_to_json(report, args.out_json)
    if args.out_csv:
        report_to_csv(report, args.out_csv)
    return {
        "command": "compress",
        "prompt_len": report.prompt_len,
        "total_kept": report.total_kept,
        "total_slots_full": cache.layers * cache.kv_heads * report.prompt_len,
        "scoring_skipped": report.scoring_skipped,
    }


def cmd_bench(args: argparse.Namespace) -> dict:
    cfg = bench.load_config(args.config)
    if args.seed:
        cfg = replace(cfg, seeds=tuple(s + args.seed for s in cfg.seeds))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.experiment == "sweep":
        rows = bench.run_budget_sweep(cfg, jobs=args.jobs)
    elif args.experiment == "rho":
        rows = bench.run_rho_sweep(cfg, jobs=args.jobs)
    elif args.experiment == "mask":
        rows = bench.run_masking_study(cfg, jobs=args.jobs)
    else:
        rows = bench.run_cost_model(cfg)
    csv_path = out_dir / f"{args.experiment}.csv"
    json_path = out_dir / f"{args.experiment}.json"
    bench.write_rows_csv(csv_path, rows)
    bench.write_rows_json(json_path, rows)
    return {
        "command": f"bench {args.experiment}",
        "rows": len(rows),
        "csv": str(csv_path),
        "json": str(json_path),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsemm",
        description="Visual-head scoring, per-head KV budgets, and cache eviction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate a synthetic OCR corpus directory")
    _add_model_args(p)
    p.add_argument("--samples", type=int, default=40)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_corpus)

    p = sub.add_parser("chase", help="score visual heads over a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--group", type=int, default=1,
                   help="query heads per kv head; >1 sums scores onto kv heads")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_chase)

    p = sub.add_parser("allocate", help="turn a score file into a budget plan")
    p.add_argument("--scores", default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--budget", type=int, required=True, help="global budget B")
    p.add_argument("--rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--policy", choices=POLICY_NAMES, default="sparsemm")
    p.add_argument("--seed", type=int, default=0, help="seed for the random policy")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_allocate)

    p = sub.add_parser("prefill", help="generate a prefill window-attention trace")
    _add_model_args(p)
    p.add_argument("--prompt-len", type=int, required=True)
    p.add_argument("--out-len", type=int, default=16)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prefill)

    p = sub.add_parser("compress", help="apply a plan to a prefill trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("bench", help="run a packaged experiment from a config file")
    p.add_argument("experiment", choices=("sweep", "rho", "mask", "cost"))
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0,
                   help="offset added to every configured seed")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.fn(args)
    except SparseMMError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    json.dump(summary, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
