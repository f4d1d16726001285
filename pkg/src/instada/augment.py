"""Copy-Paste over the synthetic pool and the augmented source pool.

Pastes are hard-edged and applied in draw order, so a later paste owns every
pixel it covers. Each paste is subtracted from all masks beneath it; an
annotation left with less than ``occlusion_drop_ratio`` of its area (or with no
pixels at all) is removed and the rest get their box and area recomputed.
Overlaps already present among the target's own annotations are left as they
were.
"""
from __future__ import annotations

import logging
import shutil
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .annotations import (
    Dataset,
    ImageRecord,
    InstanceAnnotation,
    Provenance,
    build_dataset,
    compute_frequency_groups,
    compute_image_counts,
    save_dataset,
)
from .jsonio import atomic_write_bytes, write_jsonl
from .maskops import (
    RleMask,
    decode_png,
    encode_png,
    extract_instance_patch,
    popcount,
    resize_nearest,
    rle_decode,
    rle_encode,
)
from .orchestrator.checkpoint import run_stage_items
from .seeding import rng_for

log = logging.getLogger(__name__)


class PoolBuildError(ValueError):
    pass


class EmptyPoolsError(ValueError):
    pass


@dataclass(frozen=True)
class PoolEntry:
    entry_id: str
    category_id: int
    provenance: Provenance
    patch: np.ndarray = field(repr=False, compare=False)  # RGBA
    mask: np.ndarray = field(repr=False, compare=False)  # local bool mask, patch-sized

    def __post_init__(self):
        if self.patch.shape[:2] != self.mask.shape or self.patch.ndim != 3 or self.patch.shape[2] != 4:
            raise ValueError(f"entry {self.entry_id}: patch {self.patch.shape} does not match mask {self.mask.shape}")
        self.patch.setflags(write=False)
        self.mask.setflags(write=False)


class InstancePool:
    def __init__(self, entries: Iterable[PoolEntry] = ()):
        self._entries = tuple(entries)
        by_cat: dict[int, list[int]] = {}
        for i, e in enumerate(self._entries):
            by_cat.setdefault(e.category_id, []).append(i)
        self._by_category = {c: tuple(v) for c, v in by_cat.items()}

    @property
    def entries(self) -> tuple[PoolEntry, ...]:
        return self._entries

    @property
    def by_category(self) -> Mapping[int, tuple[int, ...]]:
        return dict(self._by_category)

    def __len__(self) -> int:
        return len(self._entries)

    def counts(self) -> dict[tuple[str, int], int]:
        c = Counter((e.provenance.value, e.category_id) for e in self._entries)
        return dict(sorted(c.items()))


@dataclass(frozen=True)
class PastePolicy:
    n_min: int = 1
    n_max: int = 6
    scale_range: tuple[float, float] = (0.5, 1.5)
    pool_mix: float = 0.5
    occlusion_drop_ratio: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_min <= self.n_max:
            raise ValueError(f"need 0 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0.0 <= self.pool_mix <= 1.0:
            raise ValueError("pool_mix must lie in [0, 1]")
        if not 0.0 <= self.occlusion_drop_ratio <= 1.0:
            raise ValueError("occlusion_drop_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class Placement:
    entry: PoolEntry
    x: int
    y: int
    scale: float
    height: int
    width: int
    synthetic: bool


# --- pools ------------------------------------------------------------------------


@dataclass
class PoolReport:
    skipped: list[str] = field(default_factory=list)

    def warn(self, entry_id: str, why: str) -> None:
        log.warning("pool entry %s skipped: %s", entry_id, why)
        self.skipped.append(entry_id)


def _entry_from_crop(entry_id: str, category_id: int, provenance: Provenance, pixels: np.ndarray, mask: np.ndarray) -> PoolEntry:
    patch, local, _ = extract_instance_patch(pixels, mask)
    return PoolEntry(entry_id, category_id, provenance, patch, local)


def build_pools(
    tagent_rows: Sequence[Mapping[str, Any]],
    tagent_dir: Path | None,
    iagent_rows: Sequence[Mapping[str, Any]],
    iagent_dir: Path | None,
    dataset: Dataset,
    report: PoolReport | None = None,
) -> tuple[InstancePool, InstancePool]:
    """Synthetic pool from the text-driven manifest; source pool from the dataset plus kept counterparts."""
    report = report if report is not None else PoolReport()
    seen: set[str] = set()

    def claim(entry_id: str) -> None:
        if entry_id in seen:
            raise PoolBuildError(f"duplicate pool entry id {entry_id!r}")
        seen.add(entry_id)

    synthetic = []
    for row in tagent_rows:
        eid = str(row["entry_id"])
        claim(eid)
        path = Path(tagent_dir or ".") / row["patch_path"]
        if not path.exists():
            report.warn(eid, f"missing patch file {path}")
            continue
        patch = decode_png(path.read_bytes(), "RGBA")
        mask = rle_decode(RleMask.from_coco(row["mask_rle"]))
        if mask.shape != patch.shape[:2]:
            report.warn(eid, f"mask {mask.shape} does not match patch {patch.shape[:2]}")
            continue
        synthetic.append(PoolEntry(eid, int(row["category_id"]), Provenance.TAGENT, patch, mask))

    source = []
    pixels_cache: dict[int, np.ndarray | None] = {}

    def pixels_for(image: ImageRecord) -> np.ndarray | None:
        if image.id not in pixels_cache:
            path = dataset.resolve_image_path(image)
            pixels_cache[image.id] = decode_png(path.read_bytes(), "RGB") if path.exists() else None
        return pixels_cache[image.id]

    for ann in sorted(dataset.annotations, key=lambda a: a.id):
        eid = f"o-{ann.id}"
        claim(eid)
        px = pixels_for(dataset.image_by_id[ann.image_id])
        if px is None:
            report.warn(eid, "missing source image")
            continue
        if ann.mask.area == 0 or px.shape[:2] != ann.mask.size:
            report.warn(eid, "empty mask or size mismatch")
            continue
        source.append(_entry_from_crop(eid, ann.category_id, Provenance.ORIGINAL, px, ann.decode()))

    for row in iagent_rows:
        if not row.get("kept"):
            continue
        path = Path(iagent_dir or ".") / row["aug_image_path"]
        ids = [f"i-{row['image_id']}-{m['annotation_id']}" for m in row["masks"]]
        for eid in ids:
            claim(eid)
        if not path.exists():
            for eid in ids:
                report.warn(eid, f"missing counterpart image {path}")
            continue
        px = decode_png(path.read_bytes(), "RGB")
        for eid, m in zip(ids, row["masks"]):
            mask = rle_decode(RleMask.from_coco(m["rle"]))
            if mask.shape != px.shape[:2] or not mask.any():
                report.warn(eid, "empty mask or size mismatch")
                continue
            source.append(_entry_from_crop(eid, int(m["category_id"]), Provenance.IAGENT, px, mask))
    return InstancePool(synthetic), InstancePool(source)


# --- sampling -----------------------------------------------------------------------


def _fit(h: int, w: int, scale: float, canvas: tuple[int, int], entry_id: str) -> tuple[int, int]:
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    H, W = canvas
    if sh > H or sw > W:
        shrink = min(H / sh, W / sw)
        sh, sw = max(1, min(H, int(sh * shrink))), max(1, min(W, int(sw * shrink)))
        log.info("entry %s shrunk to %dx%d to fit the %dx%d canvas", entry_id, sw, sh, W, H)
    return sh, sw


def sample_instances(
    synthetic: InstancePool,
    source: InstancePool,
    policy: PastePolicy,
    rng: np.random.Generator,
    canvas: tuple[int, int],
) -> list[Placement]:
    if len(synthetic) == 0 and len(source) == 0:
        raise EmptyPoolsError("both instance pools are empty")
    H, W = canvas
    n = int(rng.integers(policy.n_min, policy.n_max + 1))
    lo, hi = policy.scale_range
    out = []
    for _ in range(n):
        use_synthetic = bool(rng.random() < policy.pool_mix)
        pool = synthetic if use_synthetic else source
        if len(pool) == 0:
            use_synthetic = not use_synthetic
            pool = synthetic if use_synthetic else source
        entry = pool.entries[int(rng.integers(0, len(pool)))]
        scale = float(rng.uniform(lo, hi))
        sh, sw = _fit(*entry.mask.shape, scale, canvas, entry.entry_id)
        x = int(rng.integers(0, W - sw + 1))
        y = int(rng.integers(0, H - sh + 1))
        out.append(Placement(entry, x, y, scale, sh, sw, use_synthetic))
    return out


# --- composition --------------------------------------------------------------------


@dataclass
class Layer:
    category_id: int
    mask: np.ndarray
    original_area: int
    annotation: InstanceAnnotation | None = None  # pre-existing
    source_entry: str | None = None  # pasted


@dataclass
class Composite:
    pixels: np.ndarray
    layers: list[Layer]  # survivors, bottom to top
    dropped: list[Layer]
    log: list[dict]


def copy_paste_compose(
    pixels: np.ndarray,
    annotations: Sequence[InstanceAnnotation],
    placements: Sequence[Placement],
    drop_ratio: float = 0.3,
) -> Composite:
    """Paste ``placements`` in order onto a copy of ``pixels`` and resolve occlusion."""
    H, W = pixels.shape[:2]
    canvas = np.array(pixels[..., :3], dtype=np.uint8, copy=True)
    layers = [Layer(a.category_id, a.decode(), popcount(a.decode()), annotation=a) for a in annotations]
    for layer in layers:
        if layer.mask.shape != (H, W):
            raise ValueError(f"annotation {layer.annotation.id} mask does not match the {W}x{H} image")
    rows = []
    for z, p in enumerate(placements):
        x = min(max(p.x, 0), W - p.width)
        y = min(max(p.y, 0), H - p.height)
        if (x, y) != (p.x, p.y):
            log.info("placement of %s clamped from (%d, %d) to (%d, %d)", p.entry.entry_id, p.x, p.y, x, y)
        if x < 0 or y < 0:
            raise ValueError(f"patch {p.width}x{p.height} does not fit the {W}x{H} image")
        local = resize_nearest(p.entry.mask, p.height, p.width)
        rgb = resize_nearest(p.entry.patch, p.height, p.width)[..., :3]
        full = np.zeros((H, W), dtype=bool)
        full[y : y + p.height, x : x + p.width] = local
        area = popcount(full)
        rows.append({"entry_id": p.entry.entry_id, "position": [x, y], "scale": p.scale, "z": z})
        if area == 0:
            continue
        region = canvas[y : y + p.height, x : x + p.width]
        region[local] = rgb[local]
        for layer in layers:
            layer.mask &= ~full
        layers.append(Layer(p.entry.category_id, full, area, source_entry=p.entry.entry_id))
    survivors, dropped = [], []
    for layer in layers:
        visible = popcount(layer.mask)
        if visible == 0 or visible < drop_ratio * layer.original_area:
            dropped.append(layer)
        else:
            survivors.append(layer)
    return Composite(canvas, survivors, dropped, rows)


def augment_image(
    image: ImageRecord,
    pixels: np.ndarray,
    annotations: Sequence[InstanceAnnotation],
    synthetic: InstancePool,
    source: InstancePool,
    policy: PastePolicy,
) -> Composite:
    rng = rng_for("augment", policy.seed, image.id)
    placements = sample_instances(synthetic, source, policy, rng, (image.height, image.width))
    return copy_paste_compose(pixels, annotations, placements, policy.occlusion_drop_ratio)


def load_target_pixels(dataset: Dataset, image: ImageRecord) -> np.ndarray:
    path = dataset.resolve_image_path(image)
    if not path.exists():
        log.warning("image %s missing at %s; compositing onto a black canvas", image.id, path)
        return np.zeros((image.height, image.width, 3), dtype=np.uint8)
    px = decode_png(path.read_bytes(), "RGB")
    if px.shape[:2] != (image.height, image.width):
        raise ValueError(f"image {image.id}: file is {px.shape[1]}x{px.shape[0]}, record says {image.width}x{image.height}")
    return px


def assemble_dataset(
    dataset: Dataset,
    composites: Mapping[int, Composite],
    image_paths: Mapping[int, str],
    first_pasted_id: int | None = None,
) -> Dataset:
    """Rebuild annotations from the composites.

    Surviving originals keep their ids; pasted instances get fresh ids above the
    original maximum, assigned in (image id, z) order.
    """
    next_id = first_pasted_id or max((a.id for a in dataset.annotations), default=0) + 1
    anns = []
    for image in sorted(dataset.images, key=lambda im: im.id):
        comp = composites[image.id]
        for layer in comp.layers:
            if layer.annotation is not None:
                a = layer.annotation
                anns.append(InstanceAnnotation.from_mask(a.id, image.id, a.category_id, layer.mask, a.provenance, a.source_entry))
            else:
                anns.append(
                    InstanceAnnotation.from_mask(
                        next_id, image.id, layer.category_id, layer.mask, Provenance.PASTED, layer.source_entry
                    )
                )
                next_id += 1
    images = [replace(im, file_path=image_paths.get(im.id, im.file_path)) for im in dataset.images]
    out = build_dataset(dataset.categories, images, sorted(anns, key=lambda a: a.id))
    return compute_frequency_groups(compute_image_counts(out))


def augment_batch(
    dataset: Dataset,
    synthetic: InstancePool,
    source: InstancePool,
    policy: PastePolicy,
) -> tuple[Dataset, dict[int, Composite]]:
    composites = {}
    for image in sorted(dataset.images, key=lambda im: im.id):
        px = load_target_pixels(dataset, image)
        composites[image.id] = augment_image(image, px, dataset.annotations_for(image.id), synthetic, source, policy)
    return assemble_dataset(dataset, composites, {}), composites


def run_augment(
    dataset: Dataset,
    tagent_rows: Sequence[Mapping[str, Any]],
    tagent_dir: Path,
    iagent_rows: Sequence[Mapping[str, Any]],
    iagent_dir: Path,
    cfg,
    seed: int,
    checkpoint,
    out_dir: Path,
    fresh: bool,
):
    """Materialise the augmented dataset; ``cfg`` is an :class:`~instada.orchestrator.config.AugmentConfig`."""
    out_dir = Path(out_dir)
    if fresh:
        shutil.rmtree(out_dir / "images", ignore_errors=True)
    policy = PastePolicy(cfg.n_min, cfg.n_max, tuple(cfg.scale_range), cfg.pool_mix, cfg.occlusion_drop_ratio, seed)
    report = PoolReport()
    synthetic, source = build_pools(tagent_rows, tagent_dir, iagent_rows, iagent_dir, dataset, report)
    if len(synthetic) == 0 and len(source) == 0:
        raise EmptyPoolsError("both instance pools are empty")
    targets = sorted(dataset.images, key=lambda im: im.id)

    def worker(_item_id: str, image: ImageRecord) -> dict:
        comp = augment_image(
            image, load_target_pixels(dataset, image), dataset.annotations_for(image.id), synthetic, source, policy
        )
        rel = f"images/{image.id}.png"
        atomic_write_bytes(out_dir / rel, encode_png(comp.pixels))
        return {
            "image_id": image.id,
            "file_name": rel,
            "layers": [
                {
                    "annotation_id": l.annotation.id if l.annotation is not None else None,
                    "category_id": l.category_id,
                    "source_entry": l.source_entry,
                    "rle": rle_encode(l.mask).to_coco(),
                }
                for l in comp.layers
            ],
            "dropped": [
                {"annotation_id": l.annotation.id if l.annotation is not None else None, "source_entry": l.source_entry}
                for l in comp.dropped
            ],
            "log": comp.log,
        }

    items = [(str(im.id), im) for im in targets]
    result = run_stage_items(checkpoint, "augment", items, worker, out_dir, workers=cfg.workers, fresh=fresh)
    done = dict(result.done_in_order())
    view = dataset
    if result.unfinished:
        keep = {im.id for im in targets if str(im.id) in done}
        view = build_dataset(
            dataset.categories,
            [im for im in dataset.images if im.id in keep],
            [a for a in dataset.annotations if a.image_id in keep],
            dataset.source_path,
        )
    composites = {
        int(iid): Composite(np.zeros(0), [_layer_from_row(l, dataset) for l in r["layers"]], [], r["log"])
        for iid, r in done.items()
    }
    paths = {int(iid): r["file_name"] for iid, r in done.items()}
    first_id = max((a.id for a in dataset.annotations), default=0) + 1
    aug = assemble_dataset(view, composites, paths, first_id)
    save_dataset(aug, out_dir / "dataset.json")
    write_jsonl(
        out_dir / "log.jsonl",
        [{"target_image_id": int(iid), **row} for iid, r in done.items() for row in r["log"]],
    )
    summary = {
        "pool_sizes": {"synthetic": len(synthetic), "source": len(source)},
        "pool_counts": [
            {"pool": name, "provenance": prov, "category_id": cat, "count": n}
            for name, pool in (("synthetic", synthetic), ("source", source))
            for (prov, cat), n in pool.counts().items()
        ],
        "skipped_entries": report.skipped,
        "dropped_annotations": sum(len(r["dropped"]) for r in done.values()),
    }
    return result, summary


def _layer_from_row(row: Mapping[str, Any], dataset: Dataset) -> Layer:
    mask = rle_decode(RleMask.from_coco(row["rle"]))
    ann = dataset.annotation_by_id[row["annotation_id"]] if row["annotation_id"] is not None else None
    return Layer(int(row["category_id"]), mask, popcount(mask), annotation=ann, source_entry=row["source_entry"])
