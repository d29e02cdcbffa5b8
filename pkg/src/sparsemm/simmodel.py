"""Synthetic multimodal attention model with planted visual heads.

Nothing here is learned. Attention rows are *generated* so that head
identities are ground truth: a planted head, on a fraction of output tokens
equal to its strength, concentrates mass on the image patches of the token
being produced (55% on one peak patch, 25% across the patch region), which
pins the row argmax inside the region. All other rows draw a seeded
Dirichlet-style background that puts most mass on text tokens, a little on
the few leading sink tokens, and only a thin spread across the image. That
mirrors how multimodal prompts behave: instructions are short, image tokens
dominate the length, and only visual heads need wide image coverage, which
is exactly the asymmetry budget allocation is supposed to exploit.

Decode workloads follow the same recipe over a single long prompt: planted
heads' observation-window rows concentrate on the union of upcoming ground
truth regions, and their decode rows land inside the per-token region, so a
cache policy that reads the window correctly can keep what those heads will
need. Masked heads emit exactly uniform rows. Masking is applied after all
random draws, so masking any subset never perturbs the other heads' rows.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cache import KvCache, PrefillInfo, decode_step
from .errors import EvictionPolicyError, InvalidInputError, ShapeError

__all__ = [
    "TEXT_TOKEN",
    "AttentionTrace",
    "DecodeRecord",
    "DecodeWorkload",
    "ModelGeometry",
    "OcrSample",
    "PlantedHead",
    "PlantedHeadSet",
    "SampleParams",
    "SyntheticModel",
    "build_synthetic_model",
    "corpus_digest",
    "decode_with_cache",
    "generate_ocr_samples",
    "load_corpus",
    "mask_heads",
    "replay_decode",
    "save_corpus",
]

TEXT_TOKEN = -1

DEFAULT_WINDOW = 32

# hit-row composition: peak + region + background must sum to 1, with the
# peak strictly above any other attainable entry so the argmax is certain
PEAK_MASS = 0.55
REGION_MASS = 0.25

# background mixtures (text, sink, image); corpus samples lean harder on text
CORPUS_BG = (0.90, 0.05, 0.05)
DECODE_BG = (0.96, 0.02, 0.02)

# fraction of a planted head's window-row mass steered onto the region union
WINDOW_REGION_FACTOR = 0.85

_STREAM_CORPUS = 1
_STREAM_DECODE = 2


@dataclass(frozen=True)
class ModelGeometry:
    """Layer/head layout; query_heads must be a multiple of kv_heads."""

    layers: int
    query_heads: int
    kv_heads: int
    head_dim: int = 64

    def __post_init__(self) -> None:
        if min(self.layers, self.query_heads, self.kv_heads, self.head_dim) < 1:
            raise InvalidInputError("geometry counts must be positive")
        if self.query_heads % self.kv_heads != 0:
            raise InvalidInputError(
                f"{self.query_heads} query heads not divisible by {self.kv_heads} kv heads"
            )

    @property
    def group_size(self) -> int:
        return self.query_heads // self.kv_heads

    @classmethod
    def mha(cls, layers: int, heads: int, head_dim: int = 64) -> "ModelGeometry":
        return cls(layers, heads, heads, head_dim)


@dataclass(frozen=True)
class PlantedHead:
    layer: int
    query_head: int
    strength: float


@dataclass(frozen=True)
class PlantedHeadSet:
    """Ground-truth visual heads with per-head strengths in [0, 1]."""

    entries: tuple[PlantedHead, ...] = ()

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.entries, key=lambda e: (e.layer, e.query_head)))
        seen = {(e.layer, e.query_head) for e in ordered}
        if len(seen) != len(ordered):
            raise InvalidInputError("duplicate planted head")
        for e in ordered:
            if not 0.0 <= e.strength <= 1.0:
                raise InvalidInputError(f"strength {e.strength} outside [0, 1]")
        object.__setattr__(self, "entries", ordered)

    @classmethod
    def uniform(cls, pairs, strength: float) -> "PlantedHeadSet":
        return cls(tuple(PlantedHead(int(l), int(h), float(strength)) for l, h in pairs))

    def pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((e.layer, e.query_head) for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class OcrSample:
    """One generated sample: image geometry, per-token bbox truth, prompt roles.

    prompt_layout holds TEXT_TOKEN for text positions and the patch index
    (row-major) for image positions.
    """

    image_shape: tuple[int, int]
    grid: tuple[int, int]
    pairs: tuple[tuple[int, tuple[float, float, float, float]], ...]
    prompt_layout: tuple[int, ...]

    def __post_init__(self) -> None:
        n_image = sum(1 for role in self.prompt_layout if role != TEXT_TOKEN)
        if n_image != self.grid[0] * self.grid[1]:
            raise InvalidInputError(
                f"layout has {n_image} image tokens, grid implies {self.grid[0] * self.grid[1]}"
            )

    @property
    def prompt_len(self) -> int:
        return len(self.prompt_layout)


@dataclass(frozen=True)
class AttentionTrace:
    """Per output token, the (layers, query_heads, prompt_len + t) attention rows."""

    steps: tuple[np.ndarray, ...]
    prompt_len: int

    def __post_init__(self) -> None:
        if not self.steps:
            raise InvalidInputError("trace needs at least one step")
        frozen = []
        shape = self.steps[0].shape[:2]
        for t, step in enumerate(self.steps):
            arr = np.asarray(step, dtype=np.float64)
            if arr.ndim != 3 or arr.shape[:2] != shape:
                raise ShapeError("trace steps must share (layers, heads)")
            if arr.shape[2] != self.prompt_len + t:
                raise ShapeError(
                    f"step {t} rows have length {arr.shape[2]}, expected {self.prompt_len + t}"
                )
            if np.abs(arr.sum(axis=2) - 1.0).max() > 1e-9 or (arr < 0).any():
                raise InvalidInputError(f"step {t} rows are not probability vectors")
            arr = arr.copy()
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "steps", tuple(frozen))

    @property
    def layers(self) -> int:
        return self.steps[0].shape[0]

    @property
    def query_heads(self) -> int:
        return self.steps[0].shape[1]

    @property
    def out_len(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class SampleParams:
    """Ranges (inclusive) drawn per corpus sample."""

    image_px: tuple[int, int] = (192, 512)
    grid_rows: tuple[int, int] = (6, 12)
    grid_cols: tuple[int, int] = (6, 12)
    pre_text: tuple[int, int] = (2, 5)
    instr_text: tuple[int, int] = (10, 28)
    out_tokens: tuple[int, int] = (4, 9)
    region_rows: tuple[int, int] = (1, 3)
    region_cols: tuple[int, int] = (1, 4)


def _normalize_blocks(draw: np.ndarray, roles) -> np.ndarray:
    """Compose role-wise Dirichlet blocks into rows that sum to one.

    `roles` pairs position arrays with target masses; roles with no visible
    position forfeit their mass to the rest (renormalized).
    """
    out = np.zeros_like(draw)
    live = [(pos, m) for pos, m in roles if pos.size]
    z = sum(m for _, m in live)
    for pos, m in live:
        block = draw[..., pos]
        out[..., pos] = (m / z) * block / block.sum(axis=-1, keepdims=True)
    return out


def _plant_hit_row(rng, row: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Rebuild one row as peak + region + scaled background; argmax is the peak."""
    weights = rng.exponential(size=region.size)
    weights = REGION_MASS * weights / weights.sum()
    peak = int(region[rng.integers(region.size)])
    out = (1.0 - PEAK_MASS - REGION_MASS) * row
    out[region] += weights
    out[peak] += PEAK_MASS
    return out


@dataclass(frozen=True)
class DecodeWorkload:
    """Deterministic decode scenario: prefill window rows plus per-step rows."""

    prompt_len: int
    out_len: int
    window: int
    prompt_layout: tuple[int, ...]
    union_positions: np.ndarray = field(repr=False)
    token_regions: tuple[np.ndarray, ...] = field(repr=False)
    window_attention: np.ndarray = field(repr=False)  # (L, Hq, w, Lp)
    decode_rows: tuple[np.ndarray, ...] = field(repr=False)  # per t: (L, Hq, Lp + t)


@dataclass(frozen=True)
class DecodeRecord:
    """Per-step recall and slot accounting from one decode pass."""

    recall_per_step: np.ndarray
    slots_per_step: np.ndarray
    touches_per_step: np.ndarray
    peak_slots: int
    head_mean_recall: np.ndarray = field(repr=False)  # (layers, query_heads)

    @property
    def mean_recall(self) -> float:
        return float(self.recall_per_step.mean())

    @property
    def total_touches(self) -> int:
        return int(self.touches_per_step.sum())


@dataclass(frozen=True)
class SyntheticModel:
    """Deterministic attention generator; behavior is fixed by (geometry, planted, seed)."""

    geometry: ModelGeometry
    planted: PlantedHeadSet
    seed: int
    masked: frozenset = frozenset()
    params: SampleParams = SampleParams()

    def _rng(self, stream, *key) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([int(self.seed) & 0xFFFFFFFF, stream, *key])
        )

    def _overwrite_special_rows(self, rng, block, region, visible) -> None:
        """Apply planted-hit and masked-uniform overwrites to one step block."""
        for entry in self.planted.entries:
            u = rng.random()
            if region.size and u < entry.strength:
                block[entry.layer, entry.query_head] = _plant_hit_row(
                    rng, block[entry.layer, entry.query_head], region
                )
        for l, h in sorted(self.masked):
            block[l, h] = 1.0 / visible

    def sample_ocr(self, rng) -> tuple[OcrSample, AttentionTrace]:
        """Generate one OCR-style sample and its decode trace."""
        geo, p = self.geometry, self.params
        gr = int(rng.integers(p.grid_rows[0], p.grid_rows[1] + 1))
        gc = int(rng.integers(p.grid_cols[0], p.grid_cols[1] + 1))
        h_px = int(rng.integers(p.image_px[0], p.image_px[1] + 1))
        w_px = int(rng.integers(p.image_px[0], p.image_px[1] + 1))
        n_pre = int(rng.integers(p.pre_text[0], p.pre_text[1] + 1))
        n_instr = int(rng.integers(p.instr_text[0], p.instr_text[1] + 1))
        n_out = int(rng.integers(p.out_tokens[0], p.out_tokens[1] + 1))
        g = gr * gc
        layout = np.concatenate(
            [np.full(n_pre, TEXT_TOKEN), np.arange(g), np.full(n_instr, TEXT_TOKEN)]
        )
        lp = layout.size
        sinks = np.arange(n_pre)
        image_pos = np.arange(n_pre, n_pre + g)
        instr_pos = np.arange(n_pre + g, lp)

        pairs = []
        regions = []
        cell_h, cell_w = h_px / gr, w_px / gc
        for _ in range(n_out):
            rh = min(int(rng.integers(p.region_rows[0], p.region_rows[1] + 1)), gr)
            rw = min(int(rng.integers(p.region_cols[0], p.region_cols[1] + 1)), gc)
            r0 = int(rng.integers(0, gr - rh + 1))
            c0 = int(rng.integers(0, gc - rw + 1))
            patches = np.array(
                [(r0 + i) * gc + (c0 + j) for i in range(rh) for j in range(rw)]
            )
            # inset the bbox strictly inside its patch rectangle so the
            # pixel->patch mapping recovers exactly these patches
            dx0, dy0, dx1, dy1 = rng.uniform(0.05, 0.30, size=4)
            bbox = (
                (c0 + dx0) * cell_w,
                (r0 + dy0) * cell_h,
                (c0 + rw - dx1) * cell_w,
                (r0 + rh - dy1) * cell_h,
            )
            pairs.append((int(rng.integers(1, 1_000_000)), bbox))
            regions.append(n_pre + patches)

        steps = []
        for t in range(n_out):
            visible = lp + t
            text = np.concatenate([instr_pos, lp + np.arange(t)])
            draw = rng.exponential(size=(geo.layers, geo.query_heads, visible))
            block = _normalize_blocks(
                draw, [(text, CORPUS_BG[0]), (sinks, CORPUS_BG[1]), (image_pos, CORPUS_BG[2])]
            )
            self._overwrite_special_rows(rng, block, regions[t], visible)
            steps.append(block)

        sample = OcrSample(
            (h_px, w_px),
            (gr, gc),
            tuple((tok, tuple(float(v) for v in bbox)) for tok, bbox in pairs),
            tuple(int(v) for v in layout),
        )
        return sample, AttentionTrace(tuple(steps), lp)

    def decode_workload(
        self, prompt_len: int, out_len: int, window: int = DEFAULT_WINDOW
    ) -> DecodeWorkload:
        """Build the prefill window attention and per-step decode rows.

        The prompt is laid out as a few leading sink tokens, a large image
        block, and a short instruction tail that the window mostly covers.
        Planted heads aim their window rows at the union of the regions their
        upcoming output tokens will need.
        """
        if prompt_len < window:
            raise InvalidInputError(f"prompt_len {prompt_len} shorter than window {window}")
        if out_len < 1:
            raise InvalidInputError("out_len must be positive")
        geo = self.geometry
        rng = self._rng(_STREAM_DECODE, prompt_len, out_len, window)

        # sinks | header filler | image block | instruction tail; the tail is
        # sized to sit inside the observation window, so non-visual heads'
        # dominant text mass is retained by every policy
        n_pre = min(4, max(0, prompt_len - window))
        tail = max(1, min(24, window - n_pre, prompt_len - n_pre))
        g_avail = prompt_len - n_pre - tail
        if g_avail >= 4:
            gr = int(math.isqrt(g_avail))
            gc = g_avail // gr
            g = gr * gc
            header = g_avail - g
        else:
            gr = gc = g = 0
            header = max(0, g_avail)
        layout = np.concatenate(
            [
                np.full(n_pre + header, TEXT_TOKEN),
                np.arange(g),
                np.full(tail, TEXT_TOKEN),
            ]
        )
        lp = prompt_len
        image_off = n_pre + header
        sinks = np.arange(n_pre)
        image_pos = np.arange(image_off, image_off + g)
        # header filler and image share the thin leak mass
        leak_pos = np.arange(n_pre, image_off + g)
        tail_pos = np.arange(image_off + g, lp)

        # union of ground-truth regions: rectangles until ~60% of the grid,
        # wide enough that no near-uniform budget can cover it
        rects = []
        union_patches: set[int] = set()
        if g:
            for _ in range(16):
                if len(union_patches) >= 0.6 * g:
                    break
                rh = int(rng.integers(max(1, gr // 4), max(2, gr // 3) + 1))
                rw = int(rng.integers(max(1, gc // 4), max(2, gc // 3) + 1))
                r0 = int(rng.integers(0, gr - rh + 1))
                c0 = int(rng.integers(0, gc - rw + 1))
                rects.append((r0, c0, rh, rw))
                union_patches |= {
                    (r0 + i) * gc + (c0 + j) for i in range(rh) for j in range(rw)
                }
        union_positions = image_off + np.array(sorted(union_patches), dtype=np.int64)

        token_regions = []
        for _ in range(out_len):
            if rects:
                r0, c0, rh, rw = rects[int(rng.integers(len(rects)))]
                sh = int(rng.integers(1, rh + 1))
                sw = int(rng.integers(1, rw + 1))
                o_r = r0 + int(rng.integers(0, rh - sh + 1))
                o_c = c0 + int(rng.integers(0, rw - sw + 1))
                patches = np.array(
                    [(o_r + i) * gc + (o_c + j) for i in range(sh) for j in range(sw)]
                )
                token_regions.append(image_off + patches)
            else:
                token_regions.append(np.empty(0, dtype=np.int64))

        window_stack = np.zeros((geo.layers, geo.query_heads, window, lp))
        for i in range(window):
            pos = lp - window + i
            visible = pos + 1
            text = tail_pos[tail_pos <= pos]
            leak_vis = leak_pos[leak_pos <= pos]
            draw = rng.exponential(size=(geo.layers, geo.query_heads, visible))
            block = _normalize_blocks(
                draw, [(text, DECODE_BG[0]), (sinks, DECODE_BG[1]), (leak_vis, DECODE_BG[2])]
            )
            union_vis = union_positions[union_positions <= pos]
            for entry in self.planted.entries:
                if union_vis.size:
                    u_mass = WINDOW_REGION_FACTOR * entry.strength
                    spread = rng.exponential(size=union_vis.size)
                    row = (1.0 - u_mass) * block[entry.layer, entry.query_head]
                    row[union_vis] += u_mass * spread / spread.sum()
                    block[entry.layer, entry.query_head] = row
            for l, h in sorted(self.masked):
                block[l, h] = 1.0 / visible
            window_stack[:, :, i, :visible] = block

        decode_rows = []
        for t in range(out_len):
            visible = lp + t
            text = np.concatenate([tail_pos, lp + np.arange(t)])
            draw = rng.exponential(size=(geo.layers, geo.query_heads, visible))
            block = _normalize_blocks(
                draw, [(text, DECODE_BG[0]), (sinks, DECODE_BG[1]), (leak_pos, DECODE_BG[2])]
            )
            self._overwrite_special_rows(rng, block, token_regions[t], visible)
            decode_rows.append(block)

        return DecodeWorkload(
            lp,
            out_len,
            window,
            tuple(int(v) for v in layout),
            union_positions,
            tuple(token_regions),
            window_stack,
            tuple(decode_rows),
        )


def build_synthetic_model(
    geometry: ModelGeometry,
    planted: PlantedHeadSet,
    seed: int,
    params: SampleParams | None = None,
) -> SyntheticModel:
    for entry in planted.entries:
        if not (0 <= entry.layer < geometry.layers and 0 <= entry.query_head < geometry.query_heads):
            raise InvalidInputError(
                f"planted head ({entry.layer}, {entry.query_head}) outside geometry"
            )
    return SyntheticModel(geometry, planted, int(seed), frozenset(), params or SampleParams())


def mask_heads(model: SyntheticModel, heads) -> SyntheticModel:
    """Return a model whose given heads emit exactly uniform attention."""
    heads = frozenset((int(l), int(h)) for l, h in heads)
    for l, h in heads:
        if not (0 <= l < model.geometry.layers and 0 <= h < model.geometry.query_heads):
            raise InvalidInputError(f"masked head ({l}, {h}) outside geometry")
    return replace(model, masked=model.masked | heads)


def generate_ocr_samples(model: SyntheticModel, n: int, seed: int):
    """n deterministic (OcrSample, AttentionTrace) pairs for the given seed."""
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    out = []
    for i in range(n):
        rng = model._rng(_STREAM_CORPUS, int(seed), i)
        out.append(model.sample_ocr(rng))
    return out


def decode_with_cache(
    model: SyntheticModel,
    prompt_len: int,
    out_len: int,
    policy,
    window: int = DEFAULT_WINDOW,
) -> DecodeRecord:
    """Run a decode pass under a cache policy and report recall and slot stats."""
    workload = model.decode_workload(prompt_len, out_len, window)
    return replay_decode(model.geometry, workload, policy)


def replay_decode(geometry: ModelGeometry, workload: DecodeWorkload, policy) -> DecodeRecord:
    """Drive decode_step over a prebuilt workload (reusable across policies)."""
    info = PrefillInfo(
        geometry.layers,
        geometry.query_heads,
        geometry.kv_heads,
        workload.prompt_len,
        workload.window,
        workload.window_attention,
    )
    cache = policy(info)
    if not isinstance(cache, KvCache):
        raise EvictionPolicyError(f"policy returned {type(cache).__name__}, not a KvCache")
    if (
        cache.layers != geometry.layers
        or cache.kv_heads != geometry.kv_heads
        or cache.prompt_len != workload.prompt_len
        or cache.generated != 0
    ):
        raise EvictionPolicyError("policy returned a cache for a different prefill")

    out_len = workload.out_len
    recalls = np.zeros(out_len)
    slots = np.zeros(out_len, dtype=np.int64)
    touches = np.zeros(out_len, dtype=np.int64)
    head_acc = np.zeros((geometry.layers, geometry.query_heads))
    for t, rows in enumerate(workload.decode_rows):
        stats = decode_step(cache, rows, t)
        recalls[t] = stats.captured.mean()
        head_acc += stats.captured
        slots[t] = stats.slots
        touches[t] = stats.touches
    return DecodeRecord(recalls, slots, touches, cache.total_slots(), head_acc / out_len)


def _sample_payload(sample: OcrSample, trace: AttentionTrace) -> dict:
    return {
        "image_shape": list(sample.image_shape),
        "grid": list(sample.grid),
        "pairs": [[tok, list(bbox)] for tok, bbox in sample.pairs],
        "prompt_layout": list(sample.prompt_layout),
        "rows": [[[list(map(float, row)) for row in layer] for layer in step] for step in trace.steps],
    }


def save_corpus(directory, samples) -> None:
    """Write one canonical-JSON record per sample into `directory`."""
    os.makedirs(directory, exist_ok=True)
    for i, (sample, trace) in enumerate(samples):
        path = os.path.join(directory, f"sample_{i:05d}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_sample_payload(sample, trace), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_corpus(directory):
    names = sorted(
        n for n in os.listdir(directory) if n.startswith("sample_") and n.endswith(".json")
    )
    if not names:
        raise InvalidInputError(f"no sample records in {directory}")
    out = []
    for name in names:
        with open(os.path.join(directory, name), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        sample = OcrSample(
            tuple(payload["image_shape"]),
            tuple(payload["grid"]),
            tuple((int(tok), tuple(float(v) for v in bbox)) for tok, bbox in payload["pairs"]),
            tuple(int(v) for v in payload["prompt_layout"]),
        )
        steps = tuple(np.asarray(step, dtype=np.float64) for step in payload["rows"])
        out.append((sample, AttentionTrace(steps, sample.prompt_len)))
    return out


def corpus_digest(directory) -> str:
    """sha256 over the corpus files, bytes and names, in name order."""
    digest = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        if not (name.startswith("sample_") and name.endswith(".json")):
            continue
        digest.update(name.encode())
        with open(os.path.join(directory, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()
