"""Quality filtration for generated instances.

Two schemes live here:

* dual-similarity thresholding for text-driven instances: an instance is kept
  only when its similarity to a text template *and* its similarity to the
  category's training instances both strictly exceed their thresholds;
* proportional filtration for image-conditioned counterparts: every mask gets a
  within-category percentile rank of its CLIP score, every image the mean rank
  of its masks, and the images at or above the nearest-rank ``(100 - k)``-th
  percentile of those means are retained.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_TAU_TEXT = 0.21
DEFAULT_TAU_IMAGE = 0.6
DEFAULT_K = 20.0


class Verdict(str, Enum):
    KEEP = "Keep"
    REJECT_TEXT = "RejectText"
    REJECT_IMAGE = "RejectImage"
    REJECT_BOTH = "RejectBoth"


class DegenerateCentroidError(ValueError):
    pass


@dataclass(frozen=True)
class DualThresholds:
    tau_text: float = DEFAULT_TAU_TEXT
    tau_image: float = DEFAULT_TAU_IMAGE

    def __post_init__(self):
        for name in ("tau_text", "tau_image"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1], got {v}")


def dual_similarity_verdict(text_sim: float, image_sim: float, t: DualThresholds = DualThresholds()) -> Verdict:
    text_ok = text_sim > t.tau_text
    image_ok = image_sim > t.tau_image
    if text_ok and image_ok:
        return Verdict.KEEP
    if text_ok:
        return Verdict.REJECT_IMAGE
    if image_ok:
        return Verdict.REJECT_TEXT
    return Verdict.REJECT_BOTH


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Dot product of two unit vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def text_similarity(instance_embedding, template_embedding) -> float:
    return cosine(instance_embedding, template_embedding)


def image_similarity(instance_embedding, category_centroid) -> float:
    return cosine(instance_embedding, category_centroid)


def category_centroid(embeddings: Sequence[Sequence[float]]) -> np.ndarray:
    if len(embeddings) == 0:
        raise ValueError("cannot take the centroid of no embeddings")
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("embeddings must share one dimensionality")
    mean = arr.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise DegenerateCentroidError("embeddings cancel out; centroid has zero norm")
    return mean / norm


# --- proportional filtration --------------------------------------------------


def percentile_score(s_m: float, scores: Sequence[float]) -> float:
    """Share of ``scores`` that are ``<= s_m``, in percent."""
    if len(scores) == 0:
        raise ValueError("percentile of an empty score set")
    at_most = sum(1 for s in scores if s <= s_m)
    return 100.0 * at_most / len(scores)


class CategoryScoreTable:
    """Per-category multisets of CLIP scores for one batch.

    Tables from parallel workers combine with :meth:`merge`; percentiles may only
    be read once the table is sealed.
    """

    def __init__(self):
        self._scores: dict[Hashable, list[float]] = defaultdict(list)
        self._sorted: dict[Hashable, list[float]] | None = None

    def add(self, category: Hashable, score: float) -> None:
        if self._sorted is not None:
            raise RuntimeError("score table is sealed")
        if not math.isfinite(score):
            raise ValueError(f"non-finite score {score!r}")
        self._scores[category].append(float(score))

    def merge(self, other: "CategoryScoreTable") -> None:
        for cat, values in other._scores.items():
            for v in values:
                self.add(cat, v)

    def seal(self) -> "CategoryScoreTable":
        self._sorted = {c: sorted(v) for c, v in self._scores.items()}
        return self

    def scores(self, category: Hashable) -> list[float]:
        return list(self._scores.get(category, ()))

    def percentile_exact(self, category: Hashable, s_m: float) -> Fraction:
        if self._sorted is None:
            raise RuntimeError("seal the score table before reading percentiles")
        values = self._sorted.get(category)
        if not values:
            raise ValueError(f"no scores recorded for category {category!r}")
        return Fraction(100 * bisect_right(values, s_m), len(values))

    def percentile(self, category: Hashable, s_m: float) -> float:
        return float(self.percentile_exact(category, s_m))


def image_quality_score(mask_percentiles: Sequence[float | Fraction]) -> float:
    """Mean percentile, computed exactly and rounded once.

    Exact arithmetic keeps equal means equal regardless of mask order, which
    matters because selection keeps every image tied with the threshold.
    """
    if len(mask_percentiles) == 0:
        raise ValueError("an image needs at least one mask to be scored")
    return float(sum(map(Fraction, mask_percentiles), Fraction(0)) / len(mask_percentiles))


@dataclass(frozen=True)
class ImageQualityEntry:
    image_id: Hashable
    mask_percentiles: tuple[float, ...]
    p_bar: float

    @classmethod
    def from_percentiles(cls, image_id: Hashable, mask_percentiles: Iterable[float]) -> "ImageQualityEntry":
        mp = tuple(float(p) for p in mask_percentiles)
        return cls(image_id, mp, image_quality_score(mp))


def nearest_rank_percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the element at 1-based rank ``ceil(q/100 * n)`` of the ascending sort."""
    if len(values) == 0:
        raise ValueError("percentile of an empty set")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile rank must lie in [0, 100], got {q}")
    ordered = sorted(values)
    n = len(ordered)
    rank = math.ceil(Fraction(repr(float(q))) * n / 100)
    rank = min(max(rank, 1), n)
    return ordered[rank - 1]


def proportional_threshold(p_bars: Sequence[float], k: float = DEFAULT_K) -> float:
    if not 0.0 < k <= 100.0:
        raise ValueError(f"k must lie in (0, 100], got {k}")
    return nearest_rank_percentile(p_bars, 100.0 - k)


def proportional_select(entries: Sequence[ImageQualityEntry], k: float = DEFAULT_K) -> frozenset:
    """Ids of images whose mean percentile reaches the ``(100 - k)``-th percentile; ties all kept."""
    if len(entries) == 0:
        raise ValueError("proportional_select needs at least one entry")
    threshold = proportional_threshold([e.p_bar for e in entries], k)
    return frozenset(e.image_id for e in entries if e.p_bar >= threshold)


def score_batch(
    masks: Mapping[Hashable, Sequence[tuple[Hashable, Hashable, float]]],
) -> tuple[dict[Hashable, list[float]], list[ImageQualityEntry]]:
    """Percentile every mask within its category across the whole batch.

    ``masks`` maps image id to ``(mask id, category, clip score)`` triples. Returns
    the per-image percentile lists (in input order) and quality entries for the
    images with at least one mask.
    """
    table = CategoryScoreTable()
    for rows in masks.values():
        for _, cat, s in rows:
            table.add(cat, s)
    table.seal()
    per_image: dict[Hashable, list[float]] = {}
    entries = []
    for image_id, rows in masks.items():
        exact = [table.percentile_exact(cat, s) for _, cat, s in rows]
        per_image[image_id] = [float(p) for p in exact]
        if exact:
            entries.append(ImageQualityEntry(image_id, tuple(per_image[image_id]), image_quality_score(exact)))
    return per_image, entries
