"""Visual-head chasing: turn OCR-grounded decode traces into per-head scores.

For every generated token the scorer looks up the token's ground-truth
bounding box, maps the box onto the image-patch grid, and checks whether each
head's full-row attention argmax lands on one of the covered patch tokens. A
hit adds 1/|patch set| so that precise localization outscores diffuse
coverage. Per-sample increments are summed over a corpus, divided by the
token count, and min-max normalized into [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBoxError, InvalidInputError, ShapeError
from .simmodel import AttentionTrace, OcrSample

__all__ = [
    "HeadScoreMatrix",
    "PatchIndexSet",
    "SampleScore",
    "aggregate_corpus",
    "aggregate_gqa_scores",
    "chase_corpus",
    "load_scores",
    "match_bbox_to_patches",
    "save_scores",
    "score_file_hash",
    "score_sample",
]


@dataclass(frozen=True)
class HeadScoreMatrix:
    """Non-negative per-(layer, head) scores.

    `normalization` records how the entries were produced: "none" for raw
    increments, "minmax" after corpus aggregation. `corpus_tokens` is the
    number of output tokens that contributed.
    """

    scores: np.ndarray = field(repr=False)
    normalization: str = "none"
    corpus_tokens: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("scores must be a 2-D (layers, heads) array")
        if arr.size and (not np.isfinite(arr).all() or (arr < 0).any()):
            raise InvalidInputError("scores must be finite and non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)

    @property
    def layers(self) -> int:
        return self.scores.shape[0]

    @property
    def heads(self) -> int:
        return self.scores.shape[1]

    @classmethod
    def zeros(cls, layers: int, heads: int) -> "HeadScoreMatrix":
        return cls(np.zeros((layers, heads)))


@dataclass(frozen=True)
class PatchIndexSet:
    """Row-major grid indices of the patches a bounding box overlaps."""

    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))

    def __len__(self) -> int:
        return len(self.indices)

    def prompt_positions(self, prompt_layout) -> np.ndarray:
        """Prompt positions whose image-patch label is in this set, ascending."""
        layout = np.asarray(prompt_layout)
        wanted = np.isin(layout, np.fromiter(self.indices, dtype=layout.dtype, count=len(self.indices)))
        return np.flatnonzero(wanted)


@dataclass(frozen=True)
class SampleScore:
    """Unnormalized per-sample increment plus matching diagnostics."""

    increment: HeadScoreMatrix
    tokens_scored: int
    tokens_skipped: int


def match_bbox_to_patches(bbox, image_shape, grid) -> PatchIndexSet:
    """Map a pixel rectangle onto the patch grid.

    The image is tiled uniformly into grid[0] x grid[1] cells; a patch counts
    as covered when its cell intersects the box with positive area, so a
    boundary touch does not count. Returned indices are row-major.
    """
    height, width = image_shape
    rows, cols = grid
    if rows <= 0 or cols <= 0:
        raise InvalidInputError(f"grid must be positive, got {grid}")
    if height <= 0 or width <= 0:
        raise InvalidInputError(f"image shape must be positive, got {image_shape}")
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (x1 > x0 and y1 > y0):
        raise DegenerateBoxError(f"bbox {bbox} has no positive area")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise DegenerateBoxError(f"bbox {bbox} lies outside a {height}x{width} image")

    cell_h = height / rows
    cell_w = width / cols
    # open-interval overlap: cell [c*cw, (c+1)*cw) intersects (x0, x1) with area
    r_first = max(0, int(np.floor(y0 / cell_h)))
    r_last = min(rows - 1, int(np.ceil(y1 / cell_h)) - 1)
    c_first = max(0, int(np.floor(x0 / cell_w)))
    c_last = min(cols - 1, int(np.ceil(x1 / cell_w)) - 1)
    covered = []
    for r in range(r_first, r_last + 1):
        for c in range(c_first, c_last + 1):
            if min(x1, (c + 1) * cell_w) > max(x0, c * cell_w) and min(y1, (r + 1) * cell_h) > max(y0, r * cell_h):
                covered.append(r * cols + c)
    return PatchIndexSet(tuple(covered))


def score_sample(sample: OcrSample, trace: AttentionTrace) -> SampleScore:
    """Score one sample: accumulate 1/|I| for each head whose argmax hits I.

    Tokens whose (text, bbox) pair is missing, malformed, or maps to an empty
    patch set are skipped and counted in `tokens_skipped` instead of being
    treated as misses.
    """
    layers, heads = trace.layers, trace.query_heads
    inc = np.zeros((layers, heads))
    scored = 0
    skipped = 0
    for t, rows in enumerate(trace.steps):
        if t >= len(sample.pairs):
            skipped += 1
            continue
        _, bbox = sample.pairs[t]
        try:
            patches = match_bbox_to_patches(bbox, sample.image_shape, sample.grid)
        except DegenerateBoxError:
            skipped += 1
            continue
        positions = patches.prompt_positions(sample.prompt_layout)
        if positions.size == 0:
            skipped += 1
            continue
        hit_value = 1.0 / positions.size
        top = np.argmax(rows, axis=2)
        inc += hit_value * np.isin(top, positions)
        scored += 1
    return SampleScore(HeadScoreMatrix(inc, "none", scored), scored, skipped)


def aggregate_corpus(increments, token_counts) -> HeadScoreMatrix:
    """Sum increments, divide by the total token count, min-max normalize.

    An all-zero total stays all-zero; an all-equal positive total maps to all
    ones (every head attains the maximum).
    """
    increments = list(increments)
    token_counts = [int(c) for c in token_counts]
    if not increments:
        raise InvalidInputError("aggregate_corpus requires at least one increment")
    if len(increments) != len(token_counts):
        raise ShapeError("increments and token_counts lengths differ")
    shape = increments[0].scores.shape
    if any(m.scores.shape != shape for m in increments):
        raise ShapeError("all increments must share one shape")
    total_tokens = sum(token_counts)
    if total_tokens <= 0:
        raise InvalidInputError("zero scored tokens in corpus")
    mean = sum(m.scores for m in increments) / total_tokens
    lo, hi = mean.min(), mean.max()
    if hi > lo:
        normalized = (mean - lo) / (hi - lo)
    elif hi > 0.0:
        normalized = np.ones_like(mean)
    else:
        normalized = np.zeros_like(mean)
    return HeadScoreMatrix(normalized, "minmax", total_tokens)


def chase_corpus(samples) -> tuple[HeadScoreMatrix, int]:
    """Run score_sample over (sample, trace) pairs and aggregate.

    Returns the normalized score matrix and the number of skipped tokens.
    """
    results = [score_sample(sample, trace) for sample, trace in samples]
    matrix = aggregate_corpus(
        [r.increment for r in results], [r.tokens_scored for r in results]
    )
    return matrix, sum(r.tokens_skipped for r in results)


def aggregate_gqa_scores(scores: HeadScoreMatrix, group: int) -> HeadScoreMatrix:
    """Collapse query-head scores onto kv heads by summing consecutive groups.

    Query head q belongs to kv head q // group. group=1 is the MHA identity.
    """
    if group <= 0:
        raise InvalidInputError("group must be positive")
    if scores.heads % group != 0:
        raise ShapeError(f"{scores.heads} query heads not divisible by group {group}")
    kv = scores.scores.reshape(scores.layers, scores.heads // group, group).sum(axis=2)
    return HeadScoreMatrix(kv, scores.normalization, scores.corpus_tokens)


def save_scores(path, matrix: HeadScoreMatrix) -> None:
    """Write the score-file JSON: layers, heads, row-major scores, metadata."""
    payload = {
        "layers": matrix.layers,
        "heads": matrix.heads,
        "scores": [float(v) for v in matrix.scores.ravel()],
        "normalization": matrix.normalization,
        "corpus_tokens": matrix.corpus_tokens,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_scores(path) -> HeadScoreMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    layers, heads = int(payload["layers"]), int(payload["heads"])
    flat = np.asarray(payload["scores"], dtype=np.float64)
    if flat.size != layers * heads:
        raise ShapeError("score file length does not match layers*heads")
    return HeadScoreMatrix(
        flat.reshape(layers, heads),
        str(payload.get("normalization", "none")),
        int(payload.get("corpus_tokens", 0)),
    )


def score_file_hash(path) -> str:
    """Hex sha256 of the score file bytes, recorded in plan files."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
