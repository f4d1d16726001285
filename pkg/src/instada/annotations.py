"""In-memory instance-segmentation dataset and COCO/LVIS JSON serialization."""
from __future__ import annotations

import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .maskops import (
    EmptyMaskError,
    MaskFormatError,
    RleMask,
    mask_to_bbox,
    polygons_to_mask,
    rle_decode,
    rle_encode,
)

RARE_MAX_IMAGES = 10
COMMON_MAX_IMAGES = 100
FLOAT_DECIMALS = 6


class FrequencyGroup(str, Enum):
    RARE = "r"
    COMMON = "c"
    FREQUENT = "f"


class Provenance(str, Enum):
    ORIGINAL = "original"
    TAGENT = "tagent"
    IAGENT = "iagent"
    PASTED = "pasted"


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    pass


class ReferentialIntegrityError(DatasetError):
    pass


@dataclass(frozen=True)
class CategoryEntry:
    id: int
    name: str
    image_count: int = 0
    frequency_group: FrequencyGroup | None = None


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_path: str
    annotations: tuple[int, ...] = ()


@dataclass(frozen=True)
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    mask: RleMask
    bbox: tuple[float, float, float, float]
    area: float
    provenance: Provenance = Provenance.ORIGINAL
    source_entry: str | None = None

    @classmethod
    def from_mask(
        cls,
        id: int,
        image_id: int,
        category_id: int,
        mask: np.ndarray,
        provenance: Provenance = Provenance.ORIGINAL,
        source_entry: str | None = None,
    ) -> "InstanceAnnotation":
        """Build an annotation whose bbox and area are derived from ``mask``."""
        return cls(
            id=id,
            image_id=image_id,
            category_id=category_id,
            mask=rle_encode(mask),
            bbox=mask_to_bbox(mask),
            area=int(np.count_nonzero(mask)),
            provenance=provenance,
            source_entry=source_entry,
        )

    def decode(self) -> np.ndarray:
        return rle_decode(self.mask)


@dataclass(frozen=True)
class Dataset:
    categories: tuple[CategoryEntry, ...]
    images: tuple[ImageRecord, ...]
    annotations: tuple[InstanceAnnotation, ...]
    source_path: str = field(default="", compare=False)

    @cached_property
    def category_by_id(self) -> dict[int, CategoryEntry]:
        return {c.id: c for c in self.categories}

    @cached_property
    def image_by_id(self) -> dict[int, ImageRecord]:
        return {i.id: i for i in self.images}

    @cached_property
    def annotation_by_id(self) -> dict[int, InstanceAnnotation]:
        return {a.id: a for a in self.annotations}

    @cached_property
    def annotations_by_image(self) -> dict[int, list[InstanceAnnotation]]:
        out: dict[int, list[InstanceAnnotation]] = defaultdict(list)
        for a in self.annotations:
            out[a.image_id].append(a)
        return dict(out)

    def annotations_for(self, image_id: int) -> list[InstanceAnnotation]:
        return self.annotations_by_image.get(image_id, [])

    def resolve_image_path(self, image: ImageRecord) -> Path:
        p = Path(image.file_path)
        if p.is_absolute() or not self.source_path:
            return p
        return Path(self.source_path).parent / p

    def counts(self) -> tuple[int, int, int]:
        return len(self.images), len(self.annotations), len(self.categories)


def build_dataset(
    categories: Iterable[CategoryEntry],
    images: Iterable[ImageRecord],
    annotations: Iterable[InstanceAnnotation],
    source_path: str = "",
) -> Dataset:
    """Assemble a dataset, deriving each image's annotation-id list."""
    annotations = tuple(annotations)
    per_image: dict[int, list[int]] = defaultdict(list)
    for a in annotations:
        per_image[a.image_id].append(a.id)
    images = tuple(replace(im, annotations=tuple(per_image.get(im.id, ()))) for im in images)
    return Dataset(tuple(categories), images, annotations, source_path)


# --- frequency groups ---------------------------------------------------------


def frequency_for(image_count: int, r_max: int = RARE_MAX_IMAGES, c_max: int = COMMON_MAX_IMAGES) -> FrequencyGroup:
    if image_count <= r_max:
        return FrequencyGroup.RARE
    if image_count <= c_max:
        return FrequencyGroup.COMMON
    return FrequencyGroup.FREQUENT


def compute_image_counts(d: Dataset) -> Dataset:
    seen: dict[int, set[int]] = defaultdict(set)
    for a in d.annotations:
        seen[a.category_id].add(a.image_id)
    cats = tuple(replace(c, image_count=len(seen.get(c.id, ()))) for c in d.categories)
    return replace(d, categories=cats)


def compute_frequency_groups(
    d: Dataset, r_max: int = RARE_MAX_IMAGES, c_max: int = COMMON_MAX_IMAGES
) -> Dataset:
    cats = tuple(
        replace(c, frequency_group=frequency_for(c.image_count, r_max, c_max)) for c in d.categories
    )
    return replace(d, categories=cats)


# --- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    entity: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.entity}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def _duplicates(ids: Iterable[int]) -> list[int]:
    return sorted(i for i, n in Counter(ids).items() if n > 1)


def validate_dataset(
    d: Dataset, r_max: int = RARE_MAX_IMAGES, c_max: int = COMMON_MAX_IMAGES
) -> list[Violation]:
    out: list[Violation] = []
    for name, table in (("category", d.categories), ("image", d.images), ("annotation", d.annotations)):
        for dup in _duplicates(x.id for x in table):
            out.append(Violation(f"{name} {dup}", "duplicate id"))
        for x in table:
            if x.id <= 0:
                out.append(Violation(f"{name} {x.id}", "id must be positive"))

    for c in d.categories:
        if c.image_count < 0:
            out.append(Violation(f"category {c.id}", "negative image_count"))
        elif c.frequency_group is not None and c.frequency_group != frequency_for(c.image_count, r_max, c_max):
            out.append(
                Violation(
                    f"category {c.id}",
                    "frequency group inconsistent with image_count",
                    f"{c.frequency_group.value} for {c.image_count} images",
                )
            )

    ann_ids = {a.id for a in d.annotations}
    for im in d.images:
        if im.width <= 0 or im.height <= 0:
            out.append(Violation(f"image {im.id}", "non-positive dimensions", f"{im.width}x{im.height}"))
        for aid in im.annotations:
            if aid not in ann_ids:
                out.append(Violation(f"image {im.id}", "references missing annotation", str(aid)))

    images = d.image_by_id
    cats = d.category_by_id
    for a in d.annotations:
        ent = f"annotation {a.id}"
        im = images.get(a.image_id)
        if im is None:
            out.append(Violation(ent, "references missing image", str(a.image_id)))
        if a.category_id not in cats:
            out.append(Violation(ent, "references missing category", str(a.category_id)))
        if im is not None and a.mask.size != (im.height, im.width):
            out.append(Violation(ent, "mask size differs from image size", f"{a.mask.size}"))
        if a.mask.area != a.area:
            out.append(Violation(ent, "area differs from mask popcount", f"{a.area} != {a.mask.area}"))
        try:
            tight = mask_to_bbox(rle_decode(a.mask))
        except EmptyMaskError:
            out.append(Violation(ent, "empty mask"))
            continue
        if tuple(a.bbox) != tight:
            out.append(Violation(ent, "bbox differs from mask bounding box", f"{list(a.bbox)} != {list(tight)}"))
        if im is not None:
            x, y, w, h = a.bbox
            if x < 0 or y < 0 or x + w > im.width or y + h > im.height:
                out.append(Violation(ent, "bbox outside image bounds"))
    return out


# --- JSON I/O ---------------------------------------------------------------------


def _num(v: Any) -> int | float:
    if isinstance(v, bool):
        raise TypeError("boolean is not a number")
    if isinstance(v, (int, np.integer)):
        return int(v)
    return round(float(v), FLOAT_DECIMALS)


def _require(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise DatasetParseError(f"{where}: expected an object")
    if key not in obj:
        raise DatasetParseError(f"{where}: missing field {key!r}")
    return obj[key]


def _parse_segmentation(seg: Any, height: int, width: int, where: str) -> RleMask:
    try:
        if isinstance(seg, dict):
            rle = RleMask.from_coco(seg)
            if rle.size != (height, width):
                raise DatasetParseError(f"{where}.segmentation: size {list(rle.size)} != image [{height}, {width}]")
            return rle
        if isinstance(seg, list):
            return rle_encode(polygons_to_mask(seg, height, width))
    except MaskFormatError as exc:
        raise DatasetParseError(f"{where}.segmentation: {exc}") from exc
    raise DatasetParseError(f"{where}.segmentation: expected RLE object or polygon list")


def parse_dataset(data: dict, source_path: str = "") -> Dataset:
    if not isinstance(data, dict):
        raise DatasetParseError("top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise DatasetParseError(f"missing or non-array top-level field {key!r}")

    categories = []
    for i, c in enumerate(data["categories"]):
        where = f"categories[{i}]"
        try:
            freq = c.get("frequency") if isinstance(c, dict) else None
            categories.append(
                CategoryEntry(
                    id=int(_require(c, "id", where)),
                    name=str(_require(c, "name", where)),
                    image_count=int(c.get("image_count", 0)),
                    frequency_group=FrequencyGroup(freq) if freq is not None else None,
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(f"{where}: {exc}") from exc

    images = []
    for i, im in enumerate(data["images"]):
        where = f"images[{i}]"
        try:
            file_name = im.get("file_name") if isinstance(im, dict) else None
            if file_name is None and isinstance(im, dict) and im.get("coco_url"):
                file_name = os.path.basename(str(im["coco_url"]))
            images.append(
                ImageRecord(
                    id=int(_require(im, "id", where)),
                    width=int(_require(im, "width", where)),
                    height=int(_require(im, "height", where)),
                    file_path=str(file_name or ""),
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(f"{where}: {exc}") from exc

    image_by_id = {im.id: im for im in images}
    cat_ids = {c.id for c in categories}
    annotations = []
    for i, a in enumerate(data["annotations"]):
        where = f"annotations[{i}]"
        try:
            image_id = int(_require(a, "image_id", where))
            category_id = int(_require(a, "category_id", where))
            ann_id = int(_require(a, "id", where))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(f"{where}: {exc}") from exc
        im = image_by_id.get(image_id)
        if im is None:
            raise ReferentialIntegrityError(f"{where} (id {ann_id}) references missing image id {image_id}")
        if category_id not in cat_ids:
            raise ReferentialIntegrityError(f"{where} (id {ann_id}) references missing category id {category_id}")
        mask = _parse_segmentation(_require(a, "segmentation", where), im.height, im.width, where)
        try:
            bbox = a.get("bbox")
            bbox = tuple(_num(v) for v in bbox) if bbox is not None else mask_to_bbox(rle_decode(mask))
            if len(bbox) != 4:
                raise ValueError("bbox must have 4 numbers")
            area = _num(a["area"]) if "area" in a else mask.area
            provenance = Provenance(a.get("provenance", Provenance.ORIGINAL.value))
        except (TypeError, ValueError, EmptyMaskError) as exc:
            raise DatasetParseError(f"{where}: {exc}") from exc
        annotations.append(
            InstanceAnnotation(
                id=ann_id,
                image_id=image_id,
                category_id=category_id,
                mask=mask,
                bbox=bbox,
                area=area,
                provenance=provenance,
                source_entry=a.get("source_entry"),
            )
        )

    d = build_dataset(categories, images, annotations, source_path)
    if not any("image_count" in c for c in data["categories"]):
        d = compute_image_counts(d)
    return d


def load_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_dataset(data, source_path=str(path))


def dataset_to_dict(d: Dataset) -> dict:
    images = [
        {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_path} for im in d.images
    ]
    annotations = []
    for a in d.annotations:
        row = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "segmentation": a.mask.to_coco(),
            "bbox": [_num(v) for v in a.bbox],
            "area": _num(a.area),
            "iscrowd": 0,
            "provenance": a.provenance.value,
        }
        if a.source_entry is not None:
            row["source_entry"] = a.source_entry
        annotations.append(row)
    categories = []
    for c in d.categories:
        row = {"id": c.id, "name": c.name, "image_count": c.image_count}
        if c.frequency_group is not None:
            row["frequency"] = c.frequency_group.value
        categories.append(row)
    return {"images": images, "annotations": annotations, "categories": categories}


def dumps_dataset(d: Dataset) -> str:
    return json.dumps(dataset_to_dict(d), separators=(",", ":"), ensure_ascii=False) + "\n"


def save_dataset(d: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_dataset(d), encoding="utf-8")
    os.replace(tmp, path)
