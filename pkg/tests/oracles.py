"""Independent reference implementations used as test oracles.

Each is written from the definition, deliberately without sharing code (or
structure) with the package under test.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


# --- COCO compressed RLE -------------------------------------------------------


def ref_runs(mask: np.ndarray) -> list[int]:
    """Run lengths of the column-major flattening, starting with a (possibly empty) zero run."""
    flat = [int(v) for v in np.asarray(mask, dtype=bool).flatten(order="F")]
    runs, current, length = [], 0, 0
    for v in flat:
        if v == current:
            length += 1
        else:
            runs.append(length)
            current, length = v, 1
    runs.append(length)
    return runs


def ref_counts_string(runs: list[int]) -> str:
    """Port of the reference C encoder: delta against the run two back, 5-bit groups, +48."""
    out = []
    for i, value in enumerate(runs):
        x = value - runs[i - 2] if i > 2 else value
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def ref_decode_string(s: str) -> list[int]:
    counts, p = [], 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def ref_mask_from_runs(runs: list[int], h: int, w: int) -> np.ndarray:
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for r in runs:
        flat[pos : pos + r] = val
        pos += r
        val = not val
    return flat.reshape((w, h)).T


def ref_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = [], []
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                ys.append(y)
                xs.append(x)
    if not xs:
        return (0, 0, 0, 0)
    return (min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)


# --- proportional filtration ------------------------------------------------------


def ref_percentile(s: float, population: list[float]) -> float:
    return 100.0 * len([v for v in population if v <= s]) / len(population)


def ref_batch(batch: dict) -> tuple[dict, dict]:
    """Per-mask percentiles and per-image mean percentiles."""
    by_cat: dict = {}
    for rows in batch.values():
        for _, cat, s in rows:
            by_cat.setdefault(cat, []).append(s)
    # exact rationals throughout, rounded to float only at the end
    exact = {
        iid: [Fraction(100 * len([v for v in by_cat[cat] if v <= s]), len(by_cat[cat])) for _, cat, s in rows]
        for iid, rows in batch.items()
    }
    per_image = {iid: [float(p) for p in ps] for iid, ps in exact.items()}
    means = {iid: float(sum(ps) / len(ps)) for iid, ps in exact.items() if ps}
    return per_image, means


def ref_select(means: dict, k: float) -> tuple[set, float]:
    values = sorted(means.values())
    n = len(values)
    # nearest rank: smallest rank r with r/n >= q/100, computed in exact integer arithmetic
    q_num = round((100 - k) * 10**6)
    rank = max(1, min(n, -(-q_num * n // (100 * 10**6))))
    threshold = values[rank - 1]
    return {iid for iid, m in means.items() if m >= threshold}, threshold


# --- Prompt Rethink ----------------------------------------------------------------


def ref_trace(verdicts: list[bool], max_attempts: int = 3) -> list[str]:
    """Replay pass/fail verdicts through the two-step fallback machine."""
    order = ["Initial", "TemplateFallback", "NewElements"]
    trace = ["Initial"]
    for attempt, passed in enumerate(verdicts, start=1):
        if passed:
            trace.append("Accepted")
            return trace
        if attempt >= max_attempts:
            trace.append("Discarded")
            return trace
        trace.append(order[min(attempt, 2)])
    return trace


# --- copy-paste compositing ----------------------------------------------------------


def ref_compose(h: int, w: int, existing: list[np.ndarray], pastes: list[np.ndarray], drop_ratio: float):
    """Pixel-level compositing: returns an owner map and the surviving layer indices.

    Layers are ``existing`` (assumed disjoint) followed by ``pastes`` in z-order.
    A pixel belongs to the topmost layer covering it; a layer survives when it
    keeps at least ``drop_ratio`` of its area and at least one pixel.
    """
    layers = list(existing) + list(pastes)
    owner = np.full((h, w), -1, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            for i in range(len(layers) - 1, -1, -1):
                if layers[i][y, x]:
                    owner[y, x] = i
                    break
    survivors = []
    for i, m in enumerate(layers):
        full = int(m.sum())
        visible = int((owner == i).sum())
        if visible > 0 and not visible < drop_ratio * full:
            survivors.append(i)
    return owner, survivors


def ref_resize_nearest(a: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = a.shape[:2]
    out = np.zeros((h, w) + a.shape[2:], dtype=a.dtype)
    for y in range(h):
        for x in range(w):
            out[y, x] = a[min(math.floor(y * sh / h), sh - 1), min(math.floor(x * sw / w), sw - 1)]
    return out
