"""Experiment harness: budget sweep, rho sweep, masking study, cost model.

Each experiment consumes one ExperimentConfig and emits a list of row
dataclasses plus canonical CSV (and a JSON mirror). Rows are computed per
seed — all policies in a cell share the same corpus, score matrix and decode
workload, so comparisons are paired — and merged in a fixed order keyed by
the config's own (policy, budget, seed) ordering, which makes output bytes
independent of worker count.

Seeding is hierarchical: the model seed is the cell seed, the random-plan
seed derives from (seed, budget), and fraction-specified planted heads derive
from the seed alone. Adding a policy or budget therefore never perturbs the
rows of existing cells.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import partial
from pathlib import Path

import numpy as np

from .allocator import AllocationConfig, POLICY_NAMES, allocate
from .cache import make_plan_policy
from .chaser import (
    HeadScoreMatrix,
    aggregate_gqa_scores,
    chase_corpus,
    match_bbox_to_patches,
)
from .errors import DegenerateBoxError, InvalidInputError
from .simmodel import (
    ModelGeometry,
    PlantedHeadSet,
    SyntheticModel,
    build_synthetic_model,
    generate_ocr_samples,
    mask_heads,
    replay_decode,
)

__all__ = [
    "CostRow",
    "ExperimentConfig",
    "MaskRow",
    "ResultRow",
    "load_config",
    "recovery_stats",
    "run_budget_sweep",
    "run_cost_model",
    "run_masking_study",
    "run_rho_sweep",
    "top_scored_heads",
    "write_rows_csv",
    "write_rows_json",
]

_PLANT_STREAM = 0x97AB

DEFAULT_COST_LENGTHS = (2048, 4096, 8192, 16384, 32768)


@dataclass(frozen=True)
class ExperimentConfig:
    """One JSON-loadable description of every experiment's inputs.

    planted_pairs pins the planted heads for all seeds; planted_fraction
    derives a per-seed set of round(fraction * layers * query_heads) heads
    (at least one). The masking study and the rho sweep use the first entry
    of budgets_per_head as their per-head budget.
    """

    layers: int = 8
    query_heads: int = 8
    kv_heads: int = 8
    head_dim: int = 64
    planted_pairs: tuple[tuple[int, int], ...] | None = ((0, 1), (3, 4), (6, 2))
    planted_fraction: float | None = None
    planted_strength: float = 0.8
    corpus_size: int = 40
    budgets_per_head: tuple[int, ...] = (48, 64, 128)
    rhos: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
    policies: tuple[str, ...] = ("sparsemm", "uniform", "pyramid", "random", "ada")
    mask_fractions: tuple[float, ...] = (0.0, 0.02, 0.05, 0.10)
    seeds: tuple[int, ...] = tuple(range(10))
    prompt_len: int = 384
    out_len: int = 16
    window: int = 32
    rho: float = 0.1
    cost_lengths: tuple[int, ...] = DEFAULT_COST_LENGTHS
    cost_out_len: int = 100
    cost_budget_per_head: int = 256

    def __post_init__(self) -> None:
        if not self.seeds:
            raise InvalidInputError("config needs at least one seed")
        if self.corpus_size < 1:
            raise InvalidInputError("corpus_size must be at least 1")
        if not self.budgets_per_head:
            raise InvalidInputError("config needs at least one per-head budget")
        for b in self.budgets_per_head:
            if b < self.window:
                raise InvalidInputError(
                    f"per-head budget {b} below the {self.window}-slot window"
                )
        for name in self.policies:
            if name not in POLICY_NAMES:
                raise InvalidInputError(f"unknown policy {name!r}")
        for f in self.mask_fractions:
            if not 0.0 <= f <= 1.0:
                raise InvalidInputError("mask fractions must lie in [0, 1]")
        if (self.planted_pairs is None) == (self.planted_fraction is None):
            raise InvalidInputError(
                "specify exactly one of planted_pairs and planted_fraction"
            )

    @property
    def geometry(self) -> ModelGeometry:
        return ModelGeometry(self.layers, self.query_heads, self.kv_heads, self.head_dim)

    def planted_for_seed(self, seed: int) -> PlantedHeadSet:
        if self.planted_pairs is not None:
            return PlantedHeadSet.uniform(list(self.planted_pairs), self.planted_strength)
        total = self.layers * self.query_heads
        k = max(1, round(self.planted_fraction * total))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), _PLANT_STREAM]))
        flat = rng.choice(total, size=k, replace=False)
        pairs = [(int(i) // self.query_heads, int(i) % self.query_heads) for i in flat]
        return PlantedHeadSet.uniform(pairs, self.planted_strength)


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a JSON object file."""
    blob = json.loads(Path(path).read_text())
    if not isinstance(blob, dict):
        raise InvalidInputError("config file must hold a JSON object")
    kwargs = {}
    known = {f.name for f in fields(ExperimentConfig)}
    geometry = blob.pop("geometry", None)
    if geometry:
        kwargs.update(
            layers=geometry["layers"],
            query_heads=geometry["query_heads"],
            kv_heads=geometry.get("kv_heads", geometry["query_heads"]),
            head_dim=geometry.get("head_dim", 64),
        )
    planted = blob.pop("planted", None)
    if planted:
        kwargs["planted_strength"] = planted.get("strength", 0.8)
        if "pairs" in planted:
            kwargs["planted_pairs"] = tuple((int(l), int(h)) for l, h in planted["pairs"])
            kwargs["planted_fraction"] = None
        else:
            kwargs["planted_pairs"] = None
            kwargs["planted_fraction"] = float(planted["fraction"])
    for key, value in blob.items():
        if key not in known:
            raise InvalidInputError(f"unknown config key {key!r}")
        kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value) if isinstance(value, list) else value
    return ExperimentConfig(**kwargs)


@dataclass(frozen=True)
class ResultRow:
    """One (policy, budget, seed) cell of a sweep."""

    experiment: str
    policy: str
    budget_per_head: int
    total_budget: int
    rho: float
    seed: int
    mean_recall: float
    peak_slots: int
    slot_touches: int
    recovery_precision: float
    recovery_recall: float


@dataclass(frozen=True)
class MaskRow:
    """One (seed, fraction, mode) cell of the masking study."""

    seed: int
    fraction: float
    mode: str
    n_masked: int
    recovery_recall: float
    recovery_degradation: float
    grounding_mass: float
    grounding_degradation: float
    decode_recall: float
    decode_degradation: float


@dataclass(frozen=True)
class CostRow:
    """Closed-form slot accounting for one prompt length."""

    prompt_len: int
    out_len: int
    budget_per_head: int
    kv_heads_total: int
    full_peak_slots: int
    compressed_peak_slots: int
    peak_ratio: float
    full_slot_touches: int
    compressed_slot_touches: int
    touch_ratio: float
    cache_reduction: float


def top_scored_heads(scores: HeadScoreMatrix, k: int) -> list[tuple[int, int]]:
    """The k highest-scored (layer, query_head) pairs; ties to earlier indices."""
    order = np.argsort(-scores.scores.ravel(), kind="stable")[:k]
    heads = scores.heads
    return [(int(i) // heads, int(i) % heads) for i in order]


def recovery_stats(
    scores: HeadScoreMatrix, planted: PlantedHeadSet, k: int | None = None
) -> tuple[float, float]:
    """Precision and recall of the top-k scored heads against the planted set."""
    truth = set(planted.pairs())
    if not truth:
        return 0.0, 0.0
    k = len(truth) if k is None else k
    found = set(top_scored_heads(scores, k)) & truth
    return len(found) / max(k, 1), len(found) / len(truth)


def _plan_seed(seed: int, budget: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(budget)]).generate_state(1)[0])


def _chase_for_seed(cfg: ExperimentConfig, seed: int):
    model = build_synthetic_model(cfg.geometry, cfg.planted_for_seed(seed), seed)
    samples = generate_ocr_samples(model, cfg.corpus_size, seed)
    scores, _ = chase_corpus(samples)
    return model, samples, scores


def _replay(model: SyntheticModel, workload, plan) -> tuple[float, int, int]:
    record = replay_decode(model.geometry, workload, make_plan_policy(plan))
    return record.mean_recall, record.peak_slots, record.total_touches


def _sweep_seed_rows(cfg: ExperimentConfig, seed: int) -> list[ResultRow]:
    model, _, scores = _chase_for_seed(cfg, seed)
    precision, recall = recovery_stats(scores, model.planted)
    kv_scores = aggregate_gqa_scores(scores, cfg.geometry.group_size)
    workload = model.decode_workload(cfg.prompt_len, cfg.out_len, cfg.window)
    n_kv = cfg.layers * cfg.kv_heads
    rows = []
    for budget in cfg.budgets_per_head:
        alloc_cfg = AllocationConfig(budget * n_kv, cfg.window, cfg.rho)
        for policy in cfg.policies:
            plan = allocate(
                policy,
                alloc_cfg,
                cfg.layers,
                cfg.kv_heads,
                scores=kv_scores,
                seed=_plan_seed(seed, budget),
            )
            mean_recall, peak, touches = _replay(model, workload, plan)
            rows.append(
                ResultRow(
                    "sweep",
                    policy,
                    budget,
                    budget * n_kv,
                    cfg.rho,
                    seed,
                    mean_recall,
                    peak,
                    touches,
                    precision,
                    recall,
                )
            )
    return rows


def _rho_seed_rows(cfg: ExperimentConfig, seed: int) -> list[ResultRow]:
    model, _, scores = _chase_for_seed(cfg, seed)
    precision, recall = recovery_stats(scores, model.planted)
    kv_scores = aggregate_gqa_scores(scores, cfg.geometry.group_size)
    workload = model.decode_workload(cfg.prompt_len, cfg.out_len, cfg.window)
    budget = cfg.budgets_per_head[0]
    n_kv = cfg.layers * cfg.kv_heads
    rows = []
    for rho in cfg.rhos:
        plan = allocate(
            "sparsemm",
            AllocationConfig(budget * n_kv, cfg.window, rho),
            cfg.layers,
            cfg.kv_heads,
            scores=kv_scores,
        )
        mean_recall, peak, touches = _replay(model, workload, plan)
        rows.append(
            ResultRow(
                "rho",
                "sparsemm",
                budget,
                budget * n_kv,
                float(rho),
                seed,
                mean_recall,
                peak,
                touches,
                precision,
                recall,
            )
        )
    plan = allocate(
        "uniform",
        AllocationConfig(budget * n_kv, cfg.window, 1.0),
        cfg.layers,
        cfg.kv_heads,
    )
    mean_recall, peak, touches = _replay(model, workload, plan)
    rows.append(
        ResultRow(
            "rho", "uniform", budget, budget * n_kv, 1.0, seed,
            mean_recall, peak, touches, precision, recall,
        )
    )
    return rows


def _grounding_mass(samples, planted: PlantedHeadSet) -> float:
    """Mean attention mass planted heads place on each token's own patch set."""
    total = 0.0
    count = 0
    pairs = planted.pairs()
    if not pairs:
        return 0.0
    for sample, trace in samples:
        position_of = {
            patch: pos
            for pos, patch in enumerate(sample.prompt_layout)
            if patch >= 0
        }
        for t, step in enumerate(trace.steps):
            if t >= len(sample.pairs):
                break
            try:
                patches = match_bbox_to_patches(
                    sample.pairs[t][1], sample.image_shape, sample.grid
                )
            except DegenerateBoxError:
                continue
            positions = np.array([position_of[p] for p in patches.indices])
            for l, h in pairs:
                total += float(step[l, h, positions].sum())
                count += 1
    return total / count if count else 0.0


def _mask_seed_rows(cfg: ExperimentConfig, seed: int) -> list[MaskRow]:
    base_model, base_samples, base_scores = _chase_for_seed(cfg, seed)
    planted = base_model.planted
    _, base_recovery = recovery_stats(base_scores, planted)
    base_grounding = _grounding_mass(base_samples, planted)
    budget = cfg.budgets_per_head[0]
    n_kv = cfg.layers * cfg.kv_heads
    alloc_cfg = AllocationConfig(budget * n_kv, cfg.window, cfg.rho)

    def decode_recall_for(model: SyntheticModel, scores: HeadScoreMatrix) -> float:
        kv_scores = aggregate_gqa_scores(scores, cfg.geometry.group_size)
        plan = allocate("sparsemm", alloc_cfg, cfg.layers, cfg.kv_heads, scores=kv_scores)
        workload = model.decode_workload(cfg.prompt_len, cfg.out_len, cfg.window)
        return replay_decode(model.geometry, workload, make_plan_policy(plan)).mean_recall

    base_decode = decode_recall_for(base_model, base_scores)
    total = cfg.layers * cfg.query_heads
    rows = []
    for fraction in cfg.mask_fractions:
        n_mask = round(fraction * total)
        for mode in ("top", "random"):
            if n_mask == 0:
                chosen: list[tuple[int, int]] = []
            elif mode == "top":
                chosen = top_scored_heads(base_scores, n_mask)
            else:
                rng = np.random.default_rng(
                    np.random.SeedSequence([int(seed) + 1000, n_mask])
                )
                flat = rng.choice(total, size=n_mask, replace=False)
                chosen = [
                    (int(i) // cfg.query_heads, int(i) % cfg.query_heads) for i in flat
                ]
            if chosen:
                model = mask_heads(base_model, chosen)
                samples = generate_ocr_samples(model, cfg.corpus_size, seed)
                scores, _ = chase_corpus(samples)
            else:
                model, samples, scores = base_model, base_samples, base_scores
            _, recovery = recovery_stats(scores, planted)
            grounding = _grounding_mass(samples, planted)
            decode = decode_recall_for(model, scores)
            rows.append(
                MaskRow(
                    seed,
                    float(fraction),
                    mode,
                    n_mask,
                    recovery,
                    base_recovery - recovery,
                    grounding,
                    base_grounding - grounding,
                    decode,
                    base_decode - decode,
                )
            )
    return rows


def _merge_seed_lists(cfg: ExperimentConfig, fn, jobs: int):
    runner = partial(fn, cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(runner, cfg.seeds))
    else:
        per_seed = [runner(seed) for seed in cfg.seeds]
    return [row for rows in per_seed for row in rows]


def run_budget_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[ResultRow]:
    """One paired ResultRow per (policy, budget, seed)."""
    rows = _merge_seed_lists(cfg, _sweep_seed_rows, jobs)
    policy_order = {name: i for i, name in enumerate(cfg.policies)}
    budget_order = {b: i for i, b in enumerate(cfg.budgets_per_head)}
    seed_order = {s: i for i, s in enumerate(cfg.seeds)}
    rows.sort(
        key=lambda r: (policy_order[r.policy], budget_order[r.budget_per_head], seed_order[r.seed])
    )
    return rows


def run_rho_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[ResultRow]:
    """Sparsemm rows per (rho, seed) plus one uniform reference row per seed."""
    rows = _merge_seed_lists(cfg, _rho_seed_rows, jobs)
    rho_order = {float(r): i for i, r in enumerate(cfg.rhos)}
    seed_order = {s: i for i, s in enumerate(cfg.seeds)}
    rows.sort(
        key=lambda r: (r.policy, rho_order.get(r.rho, len(rho_order)), seed_order[r.seed])
    )
    return rows


def run_masking_study(cfg: ExperimentConfig, jobs: int = 1) -> list[MaskRow]:
    """Paired top-vs-random masking rows per (seed, fraction, mode)."""
    rows = _merge_seed_lists(cfg, _mask_seed_rows, jobs)
    fraction_order = {float(f): i for i, f in enumerate(cfg.mask_fractions)}
    seed_order = {s: i for i, s in enumerate(cfg.seeds)}
    rows.sort(key=lambda r: (fraction_order[r.fraction], r.mode, seed_order[r.seed]))
    return rows


def run_cost_model(cfg: ExperimentConfig) -> list[CostRow]:
    """Closed-form peak-slot and slot-touch accounting per prompt length.

    Peak slots count one slot per retained key position per kv head, including
    generated tokens; touches count one read per query head per live slot per
    decode step. Constant model memory (weights, activations) is outside the
    proxy, so these ratios describe the cache alone, not whole-process memory.
    """
    out = cfg.cost_out_len
    b = cfg.cost_budget_per_head
    n_kv = cfg.layers * cfg.kv_heads
    n_q = cfg.layers * cfg.query_heads
    rows = []
    for lp in cfg.cost_lengths:
        kept = min(lp, b)
        full_peak = n_kv * (lp + out)
        comp_peak = n_kv * (kept + out)
        # sum over decode steps t of per-head live slots (prompt part + t)
        tail = out * (out - 1) // 2
        full_touch = n_q * (out * lp + tail)
        comp_touch = n_q * (out * kept + tail)
        rows.append(
            CostRow(
                lp,
                out,
                b,
                n_kv,
                full_peak,
                comp_peak,
                comp_peak / full_peak,
                full_touch,
                comp_touch,
                comp_touch / full_touch,
                1.0 - comp_peak / full_peak,
            )
        )
    return rows


def write_rows_csv(path, rows) -> None:
    """Canonical CSV: declared field order, repr floats, newline rows."""
    if not rows:
        raise InvalidInputError("refusing to write an empty result table")
    names = [f.name for f in fields(rows[0])]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(row).items()})


def write_rows_json(path, rows) -> None:
    """JSON mirror of the CSV rows."""
    blob = [asdict(row) for row in rows]
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")
