"""Text-driven instance generation with prompt rethinking.

An LLM first extracts a taxonomy of visual diversity axes, then writes one
prompt per sampled combination of axis values. Every prompt is rendered,
segmented and scored by :func:`~instada.filtration.dual_similarity_verdict`.
A rejected prompt is rewritten in two steps: first to the fixed template
``"a photo of a single {category}"`` plus the retained element phrases, then to
a fresh LLM prompt over a newly sampled combination. A prompt that fails all
attempts is discarded.
"""
from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .annotations import Dataset
from .backends.base import Backends, BackendError, Exhausted
from .backends.protocol import GenerationRequest
from .filtration import (
    DegenerateCentroidError,
    DualThresholds,
    Verdict,
    category_centroid,
    cosine,
    dual_similarity_verdict,
)
from .jsonio import atomic_write_bytes, read_json, write_json, write_jsonl
from .maskops import decode_png, encode_png, extract_instance_patch, rle_encode
from .orchestrator.checkpoint import run_stage_items
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

TEMPLATE_PREFIX = "a photo of a single "
DEFAULT_MAX_ATTEMPTS = 3


class PromptState(str, Enum):
    INITIAL = "Initial"
    TEMPLATE_FALLBACK = "TemplateFallback"
    NEW_ELEMENTS = "NewElements"
    ACCEPTED = "Accepted"
    DISCARDED = "Discarded"


TERMINAL_STATES = (PromptState.ACCEPTED, PromptState.DISCARDED)


class ElementExtractionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class DiversityElementSet:
    axes: dict[str, tuple[str, ...]]

    def __post_init__(self):
        if not self.axes:
            raise ValueError("a diversity element set needs at least one axis")
        for name, values in self.axes.items():
            if not values:
                raise ValueError(f"axis {name!r} has no values")
            if len(set(values)) != len(values):
                raise ValueError(f"axis {name!r} has duplicate values")

    @property
    def n_combinations(self) -> int:
        return math.prod(len(v) for v in self.axes.values())

    def combination_at(self, index: int) -> dict[str, str]:
        """Decode a mixed-radix index into one value per axis."""
        out = {}
        for name, values in reversed(list(self.axes.items())):
            index, r = divmod(index, len(values))
            out[name] = values[r]
        return {name: out[name] for name in self.axes}

    def index_of(self, combination: Mapping[str, str]) -> int | None:
        index = 0
        for name, values in self.axes.items():
            try:
                index = index * len(values) + values.index(combination[name])
            except (KeyError, ValueError):
                return None
        return index

    def to_dict(self) -> dict:
        return {"axes": {k: list(v) for k, v in self.axes.items()}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DiversityElementSet":
        return cls({str(k): tuple(str(x) for x in v) for k, v in data["axes"].items()})


@dataclass(frozen=True)
class PromptRecord:
    record_id: str
    category_id: int
    category_name: str
    text: str
    elements: dict[str, str]
    state: PromptState = PromptState.INITIAL
    attempt: int = 1
    lineage: tuple[str, ...] = ()
    trace: tuple[PromptState, ...] = (PromptState.INITIAL,)
    seed: int = 0
    reused_combination: bool = False

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def advance(self, state: PromptState, text: str | None = None, elements=None, bump: bool = True) -> "PromptRecord":
        return replace(
            self,
            state=state,
            text=self.text if text is None else text,
            elements=self.elements if elements is None else dict(elements),
            attempt=self.attempt + (1 if bump else 0),
            lineage=self.lineage + ((self.text,) if bump else ()),
            trace=self.trace + (state,),
        )

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "category_id": self.category_id,
            "category_name": self.category_name,
            "text": self.text,
            "elements": dict(self.elements),
            "state": self.state.value,
            "attempt": self.attempt,
            "lineage": list(self.lineage),
            "trace": [s.value for s in self.trace],
            "seed": self.seed,
            "reused_combination": self.reused_combination,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PromptRecord":
        return cls(
            record_id=d["record_id"],
            category_id=int(d["category_id"]),
            category_name=d["category_name"],
            text=d["text"],
            elements=dict(d["elements"]),
            state=PromptState(d["state"]),
            attempt=int(d["attempt"]),
            lineage=tuple(d["lineage"]),
            trace=tuple(PromptState(s) for s in d["trace"]),
            seed=int(d["seed"]),
            reused_combination=bool(d.get("reused_combination", False)),
        )


@dataclass(frozen=True)
class SyntheticPoolEntry:
    entry_id: str
    record_id: str
    category_id: int
    patch: np.ndarray = field(repr=False, compare=False)  # RGBA
    mask: np.ndarray = field(repr=False, compare=False)  # local mask
    text_sim: float = 0.0
    image_sim: float = 0.0


# --- stage 1: diversity elements ----------------------------------------------


def parse_elements(result: Any) -> DiversityElementSet:
    if not isinstance(result, Mapping) or not isinstance(result.get("axes"), Mapping):
        raise ValueError("LLM output lacks an 'axes' mapping")
    axes: dict[str, tuple[str, ...]] = {}
    for name, values in result["axes"].items():
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise ValueError(f"axis {name!r} must be a list of strings")
        deduped = tuple(dict.fromkeys(v.strip() for v in values if v.strip()))
        if len(deduped) != len(values):
            log.warning("axis %r: dropped %d duplicate or blank values", name, len(values) - len(deduped))
        if deduped:
            axes[str(name)] = deduped
        else:
            log.warning("axis %r has no usable values; ignoring it", name)
    return DiversityElementSet(axes)


def extract_diversity_elements(categories: Sequence[str], llm: Backends, parse_retries: int = 2) -> DiversityElementSet:
    last = ""
    for attempt in range(parse_retries + 1):
        result = llm.llm("elements", {"categories": list(categories)}, request_id=f"tagent:elements:{attempt}")
        try:
            return parse_elements(result)
        except ValueError as exc:
            last = str(exc)
            log.warning("element extraction attempt %d unusable: %s", attempt + 1, exc)
    raise ElementExtractionFailed(f"no usable element set after {parse_retries + 1} attempts: {last}")


# --- stage 2: prompt synthesis ----------------------------------------------------


def plan_combinations(elements: DiversityElementSet, n: int, seed: int) -> list[tuple[dict[str, str], bool]]:
    """``n`` combinations: distinct while the Cartesian product lasts, then resampled and flagged."""
    total = elements.n_combinations
    rng = rng_for("combinations", seed)
    distinct = rng.choice(total, size=min(n, total), replace=False) if total <= 2**62 else None
    out: list[tuple[dict[str, str], bool]] = []
    for i in range(n):
        if distinct is not None and i < len(distinct):
            out.append((elements.combination_at(int(distinct[i])), False))
        else:
            idx = int(rng_for("combinations-reuse", seed, i).integers(0, total))
            out.append((elements.combination_at(idx), True))
    return out


def template_text(category_name: str, elements: Mapping[str, str]) -> str:
    phrases = ", ".join(elements.values())
    return f"{TEMPLATE_PREFIX}{category_name}" + (f", {phrases}" if phrases else "")


def _llm_text(result: Any) -> str:
    if not isinstance(result, Mapping) or not isinstance(result.get("text"), str) or not result["text"].strip():
        raise ValueError("LLM output lacks a non-empty 'text'")
    return result["text"].strip()


def initial_record(
    record_id: str,
    category_id: int,
    category_name: str,
    combination: Mapping[str, str],
    seed: int,
    llm: Backends,
    reused: bool = False,
) -> PromptRecord:
    try:
        text = _llm_text(
            llm.llm("prompts", {"category": category_name, "combination": dict(combination)}, request_id=f"tagent:{record_id}:prompt")
        )
        state = PromptState.INITIAL
    except Exhausted:
        raise
    except (BackendError, ValueError) as exc:
        log.warning("prompt synthesis for %s fell back to the template: %s", record_id, exc)
        text = template_text(category_name, combination)
        state = PromptState.TEMPLATE_FALLBACK
    return PromptRecord(
        record_id=record_id,
        category_id=category_id,
        category_name=category_name,
        text=text,
        elements=dict(combination),
        state=state,
        trace=(state,),
        seed=seed,
        reused_combination=reused,
    )


def synthesize_prompts(
    category_id: int,
    category_name: str,
    elements: DiversityElementSet,
    n: int,
    seed: int,
    llm: Backends,
) -> list[PromptRecord]:
    if n < 1:
        raise ValueError("n must be at least 1")
    records = []
    for i, (combo, reused) in enumerate(plan_combinations(elements, n, derive_seed(seed, category_id))):
        rid = f"{category_id}:{i}"
        records.append(initial_record(rid, category_id, category_name, combo, derive_seed(seed, rid), llm, reused))
    return records


# --- stage 3: rethink -------------------------------------------------------------


def fresh_combination(elements: DiversityElementSet, previous: Mapping[str, str], seed: int) -> dict[str, str]:
    total = elements.n_combinations
    rng = rng_for("rethink-combination", seed)
    prev = elements.index_of(previous)
    if prev is None or total == 1:
        return elements.combination_at(int(rng.integers(0, total)))
    idx = int(rng.integers(0, total - 1))
    if idx >= prev:
        idx += 1
    return elements.combination_at(idx)


def rethink_step(
    record: PromptRecord,
    llm: Backends,
    elements: DiversityElementSet,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> PromptRecord:
    """Next prompt after a rejected generation."""
    if record.terminal:
        raise ValueError(f"record {record.record_id} is already {record.state.value}")
    if record.attempt >= max_attempts:
        return record.advance(PromptState.DISCARDED)
    if record.state == PromptState.INITIAL:
        return record.advance(PromptState.TEMPLATE_FALLBACK, text=template_text(record.category_name, record.elements))
    combo = fresh_combination(elements, record.elements, derive_seed(record.seed, "rethink", record.attempt))
    payload = {
        "category": record.category_name,
        "lineage": list(record.lineage) + [record.text],
        "combination": combo,
    }
    try:
        text = _llm_text(llm.llm("rethink", payload, request_id=f"tagent:{record.record_id}:rethink{record.attempt}"))
    except Exhausted:
        raise
    except (BackendError, ValueError) as exc:
        log.warning("rethink for %s failed: %s", record.record_id, exc)
        return record.advance(PromptState.DISCARDED)
    return record.advance(PromptState.NEW_ELEMENTS, text=text, elements=combo)


# --- stage 4: generate, segment, filter ------------------------------------------------


@dataclass
class TAgentContext:
    backends: Backends
    elements: DiversityElementSet
    thresholds: DualThresholds
    template_embeddings: Mapping[int, np.ndarray]
    centroids: Mapping[int, np.ndarray]
    profiles: Sequence[Mapping[str, Any]]
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    binarize_threshold: float = 0.5
    embed_seed: int = 0


@dataclass
class AttemptResult:
    state: PromptState
    text: str
    verdict: Verdict
    text_sim: float | None
    image_sim: float | None
    seed: int
    entry: SyntheticPoolEntry | None
    next_record: PromptRecord

    def to_dict(self) -> dict:
        return {
            "state": self.state.value,
            "text": self.text,
            "verdict": self.verdict.value,
            "text_sim": self.text_sim,
            "image_sim": self.image_sim,
            "seed": self.seed,
        }


def _profile_for(record: PromptRecord, profiles: Sequence[Mapping[str, Any]]) -> Mapping[str, Any]:
    index = int(record.record_id.rsplit(":", 1)[-1]) if ":" in record.record_id else 0
    return profiles[index % len(profiles)]


def process_item(record: PromptRecord, ctx: TAgentContext) -> AttemptResult:
    """One generate → segment → score round for a non-terminal record."""
    if record.terminal:
        raise ValueError(f"record {record.record_id} is already {record.state.value}")
    b = ctx.backends
    profile = _profile_for(record, ctx.profiles)
    seed = derive_seed(record.seed, "attempt", record.attempt)
    rid = f"tagent:{record.record_id}:a{record.attempt}"
    png = b.generate(
        GenerationRequest(
            request_id=f"{rid}:generate",
            prompt=record.text,
            width=int(profile["width"]),
            height=int(profile["height"]),
            steps=int(profile["steps"]),
            guidance=float(profile["guidance"]),
            seed=seed,
        )
    )
    soft = b.segment(png, request_id=f"{rid}:segment")
    mask = soft >= ctx.binarize_threshold
    text_sim = image_sim = None
    entry = None
    if not mask.any():
        verdict = Verdict.REJECT_BOTH
    else:
        patch, local, _ = extract_instance_patch(decode_png(png, "RGB"), mask)
        emb = b.embed_image(encode_png(patch), seed=ctx.embed_seed, request_id=f"{rid}:embed")
        text_sim = cosine(emb, ctx.template_embeddings[record.category_id])
        image_sim = cosine(emb, ctx.centroids[record.category_id])
        verdict = dual_similarity_verdict(text_sim, image_sim, ctx.thresholds)
        if verdict == Verdict.KEEP:
            entry = SyntheticPoolEntry(
                entry_id=f"t{record.record_id.replace(':', '-')}",
                record_id=record.record_id,
                category_id=record.category_id,
                patch=patch,
                mask=local,
                text_sim=text_sim,
                image_sim=image_sim,
            )
    if verdict == Verdict.KEEP:
        nxt = record.advance(PromptState.ACCEPTED, bump=False)
    else:
        nxt = rethink_step(record, b, ctx.elements, ctx.max_attempts)
    return AttemptResult(record.state, record.text, verdict, text_sim, image_sim, seed, entry, nxt)


def run_record(record: PromptRecord, ctx: TAgentContext) -> tuple[PromptRecord, SyntheticPoolEntry | None, list[AttemptResult]]:
    attempts: list[AttemptResult] = []
    while not record.terminal:
        res = process_item(record, ctx)
        attempts.append(res)
        record = res.next_record
    entry = attempts[-1].entry if attempts else None
    return record, entry, attempts


# --- stage preparation -------------------------------------------------------------------


def category_centroids(
    dataset: Dataset,
    category_ids: Sequence[int],
    backends: Backends,
    max_instances: int,
    embed_seed: int = 0,
    fallback: Mapping[int, np.ndarray] | None = None,
) -> dict[int, np.ndarray]:
    """Normalised mean embedding of up to ``max_instances`` training crops per category.

    Categories without any readable training crop fall back to ``fallback``
    (the template text embedding) so image similarity stays defined.
    """
    wanted = set(category_ids)
    per_cat: dict[int, list] = {c: [] for c in category_ids}
    pixels_cache: dict[int, np.ndarray | None] = {}
    for ann in sorted(dataset.annotations, key=lambda a: a.id):
        if ann.category_id not in wanted or len(per_cat[ann.category_id]) >= max_instances:
            continue
        if ann.image_id not in pixels_cache:
            path = dataset.resolve_image_path(dataset.image_by_id[ann.image_id])
            try:
                pixels_cache[ann.image_id] = decode_png(path.read_bytes(), "RGB")
            except (OSError, ValueError) as exc:
                log.warning("training image %s unreadable: %s", path, exc)
                pixels_cache[ann.image_id] = None
        px = pixels_cache[ann.image_id]
        if px is None or px.shape[:2] != ann.mask.size or ann.mask.area == 0:
            continue
        patch, _, _ = extract_instance_patch(px, ann.decode())
        per_cat[ann.category_id].append(
            backends.embed_image(encode_png(patch), seed=embed_seed, request_id=f"tagent:centroid:{ann.id}")
        )
    out = {}
    for c in category_ids:
        try:
            out[c] = category_centroid(per_cat[c])
        except (ValueError, DegenerateCentroidError):
            if fallback is None or c not in fallback:
                raise
            log.warning("category %s has no usable training crops; using its template embedding", c)
            out[c] = np.asarray(fallback[c])
    return out


def write_entry_patch(entry: SyntheticPoolEntry, out_dir: Path) -> str:
    rel = f"patches/{entry.entry_id}.png"
    atomic_write_bytes(out_dir / rel, encode_png(entry.patch))
    return rel


def entry_row(entry: SyntheticPoolEntry, patch_path: str, record: PromptRecord) -> dict:
    return {
        "entry_id": entry.entry_id,
        "category_id": entry.category_id,
        "patch_path": patch_path,
        "mask_rle": rle_encode(entry.mask).to_coco(),
        "text_sim": entry.text_sim,
        "image_sim": entry.image_sim,
        "prompt_lineage": list(record.lineage) + [record.text],
        "provenance": "tagent",
    }


# --- stage driver ----------------------------------------------------------------------


def plan_records(dataset: Dataset, category_ids: Sequence[int] | None, per_category: int) -> list[tuple[str, dict]]:
    cats = sorted(dataset.category_by_id) if category_ids is None else list(category_ids)
    unknown = [c for c in cats if c not in dataset.category_by_id]
    if unknown:
        raise ValueError(f"unknown category ids {unknown}")
    return [
        (f"{c}:{i}", {"category_id": c, "index": i})
        for c in cats
        for i in range(per_category)
    ]


def run_tagent(dataset: Dataset, backends: Backends, cfg, seed: int, checkpoint, out_dir: Path, fresh: bool, embed_seed: int = 0):
    """Run the text-driven stage; ``cfg`` is a :class:`~instada.orchestrator.config.TAgentConfig`.

    Writes ``patches/``, ``manifest.jsonl`` (accepted instances),
    ``lineage.jsonl`` (every record) and ``scores.jsonl`` (every attempt) under
    ``out_dir`` and returns the item runner's :class:`StageResult`.
    """
    out_dir = Path(out_dir)
    if fresh:
        shutil.rmtree(out_dir / "patches", ignore_errors=True)
    items = plan_records(dataset, cfg.category_ids, cfg.prompts_per_category)
    cats = sorted({p["category_id"] for _, p in items})

    elements_path = out_dir / "elements.json"
    if elements_path.exists() and not fresh:
        elements = DiversityElementSet.from_dict(read_json(elements_path))
    else:
        names = [dataset.category_by_id[c].name for c in cats]
        elements = extract_diversity_elements(names, backends, cfg.parse_retries)
        write_json(elements_path, elements.to_dict(), indent=1)

    templates = {
        c: backends.embed_text(
            cfg.text_template.format(category=dataset.category_by_id[c].name), seed=embed_seed, request_id=f"tagent:template:{c}"
        )
        for c in cats
    }
    centroids = category_centroids(dataset, cats, backends, cfg.centroid_max_instances, embed_seed, fallback=templates)
    ctx = TAgentContext(
        backends=backends,
        elements=elements,
        thresholds=DualThresholds(cfg.thresholds.text, cfg.thresholds.image),
        template_embeddings=templates,
        centroids=centroids,
        profiles=[p.model_dump() for p in cfg.profiles],
        max_attempts=cfg.max_attempts,
        binarize_threshold=cfg.binarize_threshold,
        embed_seed=embed_seed,
    )
    plans: dict[int, list] = {}

    def worker(record_id: str, payload: dict) -> dict:
        c, i = payload["category_id"], payload["index"]
        if c not in plans:  # benign race: every thread computes the same plan
            plans[c] = plan_combinations(elements, cfg.prompts_per_category, derive_seed(seed, c))
        combo, reused = plans[c][i]
        name = dataset.category_by_id[c].name
        record = initial_record(record_id, c, name, combo, derive_seed(seed, record_id), backends, reused)
        final, entry, attempts = run_record(record, ctx)
        row = None
        if entry is not None:
            row = entry_row(entry, write_entry_patch(entry, out_dir), final)
        return {"record": final.to_dict(), "attempts": [a.to_dict() for a in attempts], "entry": row}

    result = run_stage_items(checkpoint, "tagent", items, worker, out_dir, workers=cfg.workers, fresh=fresh)
    done = result.done_in_order()
    write_jsonl(out_dir / "manifest.jsonl", [r["entry"] for _, r in done if r["entry"] is not None])
    counts: dict[str, int] = {str(c): 0 for c in cats}
    for _, r in done:
        if r["entry"] is not None:
            counts[str(r["entry"]["category_id"])] += 1
    write_json(out_dir / "counts.json", counts, indent=1)
    write_jsonl(out_dir / "lineage.jsonl", [r["record"] for _, r in done])
    write_jsonl(
        out_dir / "scores.jsonl",
        [{"record_id": rid, "attempt": n + 1, **a} for rid, r in done for n, a in enumerate(r["attempts"])],
    )
    return result
