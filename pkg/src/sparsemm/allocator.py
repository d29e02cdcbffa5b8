"""Per-head KV-cache budget allocation.

The flagship policy splits a global slot budget B over N = layers x kv_heads
heads in three parts: a local window floor of w slots per head, a uniform
share r = rho * (B - N*w) / N per head, and the rest proportional to each
head's visual score. Four comparison policies share the same plan shape:
uniform (B/N each), pyramid (linearly decaying per-layer totals), random
(i.i.d. scores fed through the flagship split), and adaptive-layer (B/L per
layer, score-proportional within a layer).

All real-valued targets are rounded to integers by the largest-remainder
method with ties broken in (layer, head) index order, so every plan conserves
B exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .chaser import HeadScoreMatrix
from .errors import InfeasibleBudgetError, InvalidInputError, ShapeError

__all__ = [
    "AllocationConfig",
    "BudgetPlan",
    "POLICY_NAMES",
    "allocate",
    "allocate_adaptive_layer",
    "allocate_pyramid",
    "allocate_random",
    "allocate_sparsemm",
    "allocate_uniform",
    "load_plan",
    "save_plan",
]

DEFAULT_WINDOW = 32
DEFAULT_RHO = 0.1

POLICY_NAMES = ("sparsemm", "uniform", "pyramid", "random", "ada")


@dataclass(frozen=True)
class AllocationConfig:
    """Global budget B plus the window floor w and uniform ratio rho."""

    total_budget: int
    window: int = DEFAULT_WINDOW
    uniform_ratio: float = DEFAULT_RHO

    def __post_init__(self) -> None:
        if self.total_budget <= 0:
            raise InvalidInputError("total_budget must be positive")
        if self.window < 0:
            raise InvalidInputError("window must be non-negative")
        if not 0.0 <= self.uniform_ratio <= 1.0:
            raise InvalidInputError("uniform_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class BudgetPlan:
    """Integer budgets per (layer, kv-head), summing exactly to the budget.

    remain_after_window, uniform_extra and remain_after_uniform record the
    intermediate quantities of the three-part split when the producing policy
    defines them (None otherwise).
    """

    budgets: np.ndarray = field(repr=False)
    total_budget: int = 0
    window: int = DEFAULT_WINDOW
    uniform_ratio: float = DEFAULT_RHO
    allocator: str = "sparsemm"
    remain_after_window: float | None = None
    uniform_extra: float | None = None
    remain_after_uniform: float | None = None
    score_file_hash: str = ""

    def __post_init__(self) -> None:
        arr = np.asarray(self.budgets)
        if arr.ndim != 2:
            raise ShapeError("budgets must be a 2-D (layers, kv_heads) array")
        if not np.issubdtype(arr.dtype, np.integer):
            raise InvalidInputError("budgets must be integers")
        if (arr < 0).any():
            raise InvalidInputError("budgets must be non-negative")
        if int(arr.sum()) != self.total_budget:
            raise InvalidInputError(
                f"plan sums to {int(arr.sum())}, expected {self.total_budget}"
            )
        arr = arr.astype(np.int64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "budgets", arr)

    @property
    def layers(self) -> int:
        return self.budgets.shape[0]

    @property
    def kv_heads(self) -> int:
        return self.budgets.shape[1]


def _largest_remainder(targets: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative real targets to integers summing to `total`.

    Floors everything, then hands out the missing slots one each to the
    entries with the largest fractional parts; ties go to the earliest
    (layer, head) index via the stable sort.
    """
    flat = np.asarray(targets, dtype=np.float64).ravel()
    base = np.floor(flat).astype(np.int64)
    deficit = int(total) - int(base.sum())
    if deficit < 0 or deficit > flat.size:
        raise InvalidInputError(
            f"rounding deficit {deficit} outside [0, {flat.size}]; targets do not sum to {total}"
        )
    if deficit:
        order = np.argsort(-(flat - base), kind="stable")
        base[order[:deficit]] += 1
    return base.reshape(np.asarray(targets).shape)


def _check_feasible(budget: int, n_heads: int, window: int) -> None:
    if budget < n_heads * window:
        raise InfeasibleBudgetError(
            f"budget {budget} cannot give {n_heads} heads a {window}-slot floor"
        )


def allocate_sparsemm(scores: HeadScoreMatrix, config: AllocationConfig) -> BudgetPlan:
    """Three-part split: window floor + uniform share + score-proportional rest."""
    layers, heads = scores.layers, scores.heads
    n = layers * heads
    budget, w, rho = config.total_budget, config.window, config.uniform_ratio
    _check_feasible(budget, n, w)
    remain1 = budget - n * w
    uniform_extra = rho * remain1 / n
    remain2 = remain1 - rho * remain1
    total_score = float(scores.scores.sum())
    if total_score > 0.0:
        score_part = remain2 * scores.scores / total_score
    else:
        warnings.warn("all-zero scores: falling back to a uniform split", stacklevel=2)
        score_part = np.full((layers, heads), remain2 / n)
    budgets = _largest_remainder(w + uniform_extra + score_part, budget)
    return BudgetPlan(
        budgets,
        budget,
        w,
        rho,
        "sparsemm",
        float(remain1),
        float(uniform_extra),
        float(remain2),
    )


def allocate_uniform(config: AllocationConfig, layers: int, heads: int) -> BudgetPlan:
    """Equal split: floor(B/N) per head, remainder to the earliest heads."""
    n = layers * heads
    budget = config.total_budget
    if budget < n:
        raise InfeasibleBudgetError(f"budget {budget} below one slot per head ({n})")
    base, rem = divmod(budget, n)
    flat = np.full(n, base, dtype=np.int64)
    flat[:rem] += 1
    return BudgetPlan(
        flat.reshape(layers, heads),
        budget,
        config.window,
        config.uniform_ratio,
        "uniform",
    )


def allocate_pyramid(config: AllocationConfig, layers: int, heads: int) -> BudgetPlan:
    """Linearly decaying per-layer totals on top of the window floor.

    Layer l carries weight (layers - l) of the post-floor budget, so totals
    decrease from layer 0 to the last layer; heads within a layer split its
    total equally.
    """
    n = layers * heads
    budget, w = config.total_budget, config.window
    _check_feasible(budget, n, w)
    extra = budget - n * w
    weights = np.arange(layers, 0, -1, dtype=np.float64)
    layer_totals = _largest_remainder(heads * w + extra * weights / weights.sum(), budget)
    rows = []
    for total in layer_totals:
        base, rem = divmod(int(total), heads)
        row = np.full(heads, base, dtype=np.int64)
        row[:rem] += 1
        rows.append(row)
    return BudgetPlan(
        np.stack(rows),
        budget,
        w,
        config.uniform_ratio,
        "pyramid",
        float(extra),
    )


def allocate_random(
    config: AllocationConfig, layers: int, heads: int, seed: int
) -> BudgetPlan:
    """Control policy: i.i.d. uniform scores through the flagship split."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, int(seed)]))
    scores = HeadScoreMatrix(rng.random((layers, heads)))
    plan = allocate_sparsemm(scores, config)
    return BudgetPlan(
        plan.budgets,
        plan.total_budget,
        plan.window,
        plan.uniform_ratio,
        "random",
        plan.remain_after_window,
        plan.uniform_extra,
        plan.remain_after_uniform,
    )


def allocate_adaptive_layer(
    scores: HeadScoreMatrix, config: AllocationConfig
) -> BudgetPlan:
    """Equal per-layer totals of B/L; score-proportional within each layer.

    Every head keeps the w floor; a layer with no score mass falls back to an
    equal split of its post-floor total.
    """
    layers, heads = scores.layers, scores.heads
    n = layers * heads
    budget, w = config.total_budget, config.window
    _check_feasible(budget, n, w)
    layer_totals = _largest_remainder(
        np.full(layers, budget / layers), budget
    )
    rows = []
    for l, total in enumerate(layer_totals):
        extra = int(total) - heads * w
        row_scores = scores.scores[l]
        mass = float(row_scores.sum())
        if mass > 0.0:
            targets = w + extra * row_scores / mass
        else:
            targets = np.full(heads, w + extra / heads)
        rows.append(_largest_remainder(targets, int(total)))
    return BudgetPlan(
        np.stack(rows),
        budget,
        w,
        config.uniform_ratio,
        "ada",
        float(budget - n * w),
    )


def allocate(
    policy: str,
    config: AllocationConfig,
    layers: int,
    heads: int,
    scores: HeadScoreMatrix | None = None,
    seed: int = 0,
) -> BudgetPlan:
    """Dispatch by policy name; score-driven policies require `scores`."""
    if policy not in POLICY_NAMES:
        raise InvalidInputError(f"unknown policy {policy!r}; expected one of {POLICY_NAMES}")
    if policy in ("sparsemm", "ada"):
        if scores is None:
            raise InvalidInputError(f"policy {policy!r} requires a score matrix")
        if (scores.layers, scores.heads) != (layers, heads):
            raise ShapeError(
                f"score shape {(scores.layers, scores.heads)} != plan shape {(layers, heads)}"
            )
        fn = allocate_sparsemm if policy == "sparsemm" else allocate_adaptive_layer
        return fn(scores, config)
    if policy == "uniform":
        return allocate_uniform(config, layers, heads)
    if policy == "pyramid":
        return allocate_pyramid(config, layers, heads)
    return allocate_random(config, layers, heads, seed)


def save_plan(path, plan: BudgetPlan) -> None:
    payload = {
        "budget_B": plan.total_budget,
        "w": plan.window,
        "rho": plan.uniform_ratio,
        "plan": [[int(b) for b in row] for row in plan.budgets],
        "allocator": plan.allocator,
        "score_file_hash": plan.score_file_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_plan(path) -> BudgetPlan:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return BudgetPlan(
        np.asarray(payload["plan"], dtype=np.int64),
        int(payload["budget_B"]),
        int(payload["w"]),
        float(payload["rho"]),
        str(payload["allocator"]),
        score_file_hash=str(payload.get("score_file_hash", "")),
    )
