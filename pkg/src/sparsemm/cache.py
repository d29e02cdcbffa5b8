"""KV-cache eviction under a budget plan.

Compression happens once, at the end of prefill: the last w prompt queries
(the observation window) attend over every prompt key, their attention rows
are averaged per key position, and each head keeps its window plus the
top-(b - w) positions by that average. Generated tokens are appended without
eviction. Slots carry no value payloads here; a slot is its absolute
position, and quality is measured as the attention mass the retained slots
capture against a full-cache shadow row.

Under grouped-query attention the query heads sharing one kv head have their
window attentions summed before averaging, so selection happens per kv head.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import EvictionPolicyError, InvalidInputError, ShapeError
from .tensor import CausalMask, Matrix, matmul_scaled, softmax_row_masked

__all__ = [
    "EvictionReport",
    "HeadEviction",
    "KvCache",
    "PrefillInfo",
    "StepStats",
    "TopKSelection",
    "average_window_scores",
    "compress_prefill",
    "decode_step",
    "keep_all_policy",
    "make_plan_policy",
    "report_to_csv",
    "report_to_json",
    "select_topk",
    "window_attention",
]


def window_attention(q_local: Matrix, k_all: Matrix) -> Matrix:
    """Attention of the last-w prompt queries over all Lp prompt keys.

    Equals the final w rows of full causal attention over the prompt; only
    those rows are ever computed.
    """
    w, lp = q_local.rows, k_all.rows
    if w > lp:
        raise InvalidInputError(f"window {w} exceeds prompt length {lp}")
    if q_local.cols != k_all.cols:
        raise ShapeError(
            f"head dims differ: q has {q_local.cols}, k has {k_all.cols}"
        )
    scores = matmul_scaled(q_local, k_all, 1.0 / math.sqrt(q_local.cols))
    return softmax_row_masked(scores, CausalMask(), lp - w)


def average_window_scores(attn) -> np.ndarray:
    """Per-key mean of the window rows, for keys left of the window.

    Input is (w, Lp); output has length Lp - w. Keys inside the window are
    excluded because they are retained unconditionally.
    """
    arr = attn.array if isinstance(attn, Matrix) else np.asarray(attn, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("average_window_scores expects a (w, Lp) matrix")
    w, lp = arr.shape
    if w > lp:
        raise InvalidInputError(f"window {w} exceeds prompt length {lp}")
    return arr[:, : lp - w].mean(axis=0) if w else np.zeros(lp)


class TopKSelection(NamedTuple):
    positions: np.ndarray
    clamped: bool


def select_topk(scores, k: int) -> TopKSelection:
    """Positions of the k largest scores, ascending; ties favor earlier positions.

    k larger than the vector clamps to its length and sets the flag.
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError("select_topk expects a 1-D score vector")
    if not np.isfinite(arr).all():
        raise InvalidInputError("scores must be finite")
    if k < 0:
        raise InvalidInputError("k must be non-negative")
    clamped = k > arr.size
    k = min(k, arr.size)
    order = np.lexsort((np.arange(arr.size), -arr))
    return TopKSelection(np.sort(order[:k]), clamped)


@dataclass(frozen=True)
class HeadEviction:
    """Retention outcome for one (layer, kv-head)."""

    layer: int
    kv_head: int
    budget: int
    kept: tuple[int, ...]
    clamped: bool


@dataclass(frozen=True)
class EvictionReport:
    """Per-head kept positions and window-average scores from one prefill."""

    prompt_len: int
    window: int
    heads: tuple[HeadEviction, ...]
    window_scores: np.ndarray = field(repr=False)  # (L, H_kv, Lp - w)
    scoring_skipped: bool = False

    @property
    def total_kept(self) -> int:
        return sum(len(h.kept) for h in self.heads)


class KvCache:
    """Retained prompt slots per (layer, kv-head) plus appended generations.

    A slot is identified by its absolute position. One decode session owns a
    cache at a time; `append_generated` is the only mutation.
    """

    def __init__(self, layers: int, kv_heads: int, prompt_len: int, kept_positions):
        if layers <= 0 or kv_heads <= 0:
            raise InvalidInputError("cache needs positive layer and head counts")
        if prompt_len < 0:
            raise InvalidInputError("prompt_len must be non-negative")
        self.layers = layers
        self.kv_heads = kv_heads
        self.prompt_len = prompt_len
        self.generated = 0
        self._kept: list[list[np.ndarray]] = []
        mask = np.zeros((layers, kv_heads, prompt_len), dtype=bool)
        for l in range(layers):
            row = []
            for j in range(kv_heads):
                pos = np.asarray(kept_positions[l][j], dtype=np.int64)
                if pos.size:
                    if pos.min() < 0 or pos.max() >= prompt_len:
                        raise EvictionPolicyError(
                            f"head ({l},{j}) retains positions outside [0, {prompt_len})"
                        )
                    if (np.diff(pos) <= 0).any():
                        raise EvictionPolicyError(
                            f"head ({l},{j}) positions must be strictly increasing"
                        )
                mask[l, j, pos] = True
                row.append(pos)
            self._kept.append(row)
        self.prompt_mask = mask

    @classmethod
    def full(cls, layers: int, kv_heads: int, prompt_len: int) -> "KvCache":
        everything = np.arange(prompt_len)
        return cls(
            layers,
            kv_heads,
            prompt_len,
            [[everything for _ in range(kv_heads)] for _ in range(layers)],
        )

    def prompt_kept(self, layer: int, kv_head: int) -> np.ndarray:
        return self._kept[layer][kv_head]

    def positions(self, layer: int, kv_head: int) -> np.ndarray:
        gen = self.prompt_len + np.arange(self.generated)
        return np.concatenate([self._kept[layer][kv_head], gen])

    def slot_count(self, layer: int, kv_head: int) -> int:
        return len(self._kept[layer][kv_head]) + self.generated

    def total_slots(self) -> int:
        return sum(len(p) for row in self._kept for p in row) + self.generated * self.layers * self.kv_heads

    def append_generated(self, position: int) -> None:
        expected = self.prompt_len + self.generated
        if position != expected:
            raise EvictionPolicyError(
                f"append position {position} != next decode position {expected}"
            )
        self.generated += 1


def compress_prefill(window_attn, plan, w: int) -> tuple[KvCache, EvictionReport]:
    """Retain, per kv head, the w-window plus the top (b - w) keys by mean score.

    `window_attn` is (layers, query_heads, w, Lp); query heads are summed onto
    their kv head before averaging. Budgets at or above Lp keep the whole
    prompt. A prompt shorter than w keeps everything and skips scoring.
    """
    attn = np.asarray(window_attn, dtype=np.float64)
    if attn.ndim != 4:
        raise ShapeError("window_attn must be (layers, query_heads, w, Lp)")
    layers, query_heads, rows, lp = attn.shape
    if plan.layers != layers:
        raise ShapeError(f"plan has {plan.layers} layers, trace has {layers}")
    if query_heads % plan.kv_heads != 0:
        raise ShapeError(
            f"{query_heads} query heads not divisible by {plan.kv_heads} kv heads"
        )
    group = query_heads // plan.kv_heads

    if lp < w:
        cache = KvCache.full(layers, plan.kv_heads, lp)
        report = EvictionReport(
            lp,
            w,
            tuple(
                HeadEviction(l, j, int(plan.budgets[l, j]), tuple(range(lp)), False)
                for l in range(layers)
                for j in range(plan.kv_heads)
            ),
            np.zeros((layers, plan.kv_heads, 0)),
            scoring_skipped=True,
        )
        return cache, report

    if rows != w:
        raise ShapeError(f"window_attn has {rows} rows, expected w={w}")
    if (plan.budgets < w).any():
        raise InvalidInputError("plan grants some head fewer than w slots")

    grouped = attn.reshape(layers, plan.kv_heads, group, w, lp).sum(axis=2)
    window_positions = np.arange(lp - w, lp)
    kept_positions: list[list[np.ndarray]] = []
    entries = []
    scores = np.empty((layers, plan.kv_heads, lp - w))
    for l in range(layers):
        row_kept = []
        for j in range(plan.kv_heads):
            abar = average_window_scores(grouped[l, j])
            scores[l, j] = abar
            b = int(plan.budgets[l, j])
            if b >= lp:
                kept = np.arange(lp)
                clamped = b > lp
            else:
                sel = select_topk(abar, b - w)
                kept = np.concatenate([sel.positions, window_positions])
                kept.sort()
                clamped = sel.clamped
            row_kept.append(kept)
            entries.append(HeadEviction(l, j, b, tuple(int(p) for p in kept), clamped))
        kept_positions.append(row_kept)
    cache = KvCache(layers, plan.kv_heads, lp, kept_positions)
    return cache, EvictionReport(lp, w, tuple(entries), scores)


class StepStats(NamedTuple):
    captured: np.ndarray  # (layers, query_heads) attention-mass recall
    slots: int  # cache slots live while attending
    touches: int  # query-head slot reads this step


def decode_step(cache: KvCache, full_rows, step: int) -> StepStats:
    """Score one decode step against the cache, then append the new token.

    `full_rows` is the full-cache shadow attention (layers, query_heads,
    prompt_len + step) of the token generated at position prompt_len + step.
    Captured mass is the fraction of each row's total mass on retained slots;
    generated slots are always retained.
    """
    rows = np.asarray(full_rows, dtype=np.float64)
    if rows.ndim != 3:
        raise ShapeError("full_rows must be (layers, query_heads, positions)")
    layers, query_heads, length = rows.shape
    if layers != cache.layers or query_heads % cache.kv_heads != 0:
        raise ShapeError("full_rows geometry does not match the cache")
    if length != cache.prompt_len + step or step != cache.generated:
        raise InvalidInputError(
            f"step {step} rows of length {length} do not match cache state"
        )
    group = query_heads // cache.kv_heads
    mask = np.repeat(cache.prompt_mask, group, axis=1)
    prompt_part = rows[:, :, : cache.prompt_len]
    gen_part = rows[:, :, cache.prompt_len:].sum(axis=2)
    captured = (prompt_part * mask).sum(axis=2) + gen_part
    total = (prompt_part * np.ones_like(mask)).sum(axis=2) + gen_part
    slots = cache.total_slots()
    touches = sum(
        group * cache.slot_count(l, j)
        for l in range(cache.layers)
        for j in range(cache.kv_heads)
    )
    cache.append_generated(cache.prompt_len + step)
    return StepStats(captured / total, slots, touches)


@dataclass(frozen=True)
class PrefillInfo:
    """What a cache policy sees after prefill: geometry plus window attention."""

    layers: int
    query_heads: int
    kv_heads: int
    prompt_len: int
    window: int
    window_attention: np.ndarray = field(repr=False)  # (L, Hq, w, Lp)


CachePolicy = Callable[[PrefillInfo], KvCache]


def keep_all_policy(info: PrefillInfo) -> KvCache:
    """No eviction: retain every prompt position."""
    return KvCache.full(info.layers, info.kv_heads, info.prompt_len)


def make_plan_policy(plan) -> CachePolicy:
    """Policy that compresses the prefill under a fixed budget plan."""

    def policy(info: PrefillInfo) -> KvCache:
        if plan.window != info.window:
            raise InvalidInputError(
                f"plan window {plan.window} != decode window {info.window}"
            )
        cache, _ = compress_prefill(info.window_attention, plan, info.window)
        return cache

    return policy


def report_to_json(report: EvictionReport, path) -> None:
    payload = {
        "prompt_len": report.prompt_len,
        "window": report.window,
        "scoring_skipped": report.scoring_skipped,
        "total_kept": report.total_kept,
        "heads": [
            {
                "layer": h.layer,
                "kv_head": h.kv_head,
                "budget": h.budget,
                "kept": list(h.kept),
                "clamped": h.clamped,
            }
            for h in report.heads
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def report_to_csv(report: EvictionReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "kv_head", "budget", "kept_count", "clamped", "kept_positions"])
        for h in report.heads:
            writer.writerow(
                [h.layer, h.kv_head, h.budget, len(h.kept), int(h.clamped), ";".join(map(str, h.kept))]
            )
