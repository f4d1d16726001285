"""Image-conditioned counterpart generation.

For every training image the stage captions it, fuses the edges of the image
with the edges of its rendered instance masks, scores visual complexity and maps
it to a denoising strength (complex scenes change less). A controlled img2img
call produces the counterpart; each original box is then fed to a box-prompted
segmenter to re-annotate it. Counterparts are finally ranked batch-wide by the
mean within-category percentile of their masks' CLIP scores and only the top
``k`` percent of images are kept.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .annotations import Dataset, ImageRecord, InstanceAnnotation
from .backends.base import Backends, ProtocolError
from .backends.protocol import DEFAULT_CONTROL_STRENGTH, PROFILE_A, GenerationRequest, b64encode
from .jsonio import atomic_write_bytes, write_json, write_jsonl
from .orchestrator.checkpoint import run_stage_items
from .filtration import cosine, proportional_select, proportional_threshold, score_batch
from .maskops import (
    box_to_pixel_bounds,
    decode_png,
    encode_png,
    extract_instance_patch,
    fuse_edge_maps,
    gray_to_png,
    mask_to_bbox,
    mask_to_png,
    png_size,
    rle_decode,
    rle_encode,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

DEFAULT_S_MIN = 0.3
DEFAULT_S_MAX = 0.8
DEFAULT_ALPHA = 0.5
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def adaptive_strength(c: float, s_min: float = DEFAULT_S_MIN, s_max: float = DEFAULT_S_MAX) -> float:
    """Denoising strength for complexity ``c``: linear from ``s_max`` at 0 down to ``s_min`` at 1."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"complexity must lie in [0, 1], got {c}")
    if not 0.0 <= s_min <= s_max <= 1.0:
        raise ValueError(f"need 0 <= s_min <= s_max <= 1, got {s_min}, {s_max}")
    return min(max(s_max - (s_max - s_min) * c, s_min), s_max)


@dataclass(frozen=True)
class GuideBundle:
    caption: str
    fused_edges: np.ndarray = field(repr=False, compare=False)
    complexity: float
    strength: float
    alpha: float = DEFAULT_ALPHA

    def __eq__(self, other):
        if not isinstance(other, GuideBundle):
            return NotImplemented
        return (
            (self.caption, self.complexity, self.strength, self.alpha)
            == (other.caption, other.complexity, other.strength, other.alpha)
            and np.array_equal(self.fused_edges, other.fused_edges)
        )

    __hash__ = None


def source_png(path: Path) -> bytes:
    """Image bytes as PNG; PNG files pass through untouched so embedded metadata survives."""
    data = Path(path).read_bytes()
    if data.startswith(PNG_SIGNATURE):
        return data
    with Image.open(BytesIO(data)) as img:
        return encode_png(np.array(img.convert("RGB")))


def build_guides(
    image: bytes,
    union_mask: np.ndarray,
    backends: Backends,
    alpha: float = DEFAULT_ALPHA,
    s_min: float = DEFAULT_S_MIN,
    s_max: float = DEFAULT_S_MAX,
    request_id: str = "",
) -> GuideBundle:
    h, w = png_size(image)
    if union_mask.shape != (h, w):
        raise ValueError(f"mask {union_mask.shape} does not match image {(h, w)}")
    caption = backends.caption(image, request_id=f"{request_id}:caption")
    e_image = backends.edge(image, request_id=f"{request_id}:edge-image")
    e_mask = backends.edge(mask_to_png(union_mask), request_id=f"{request_id}:edge-mask")
    for name, e in (("image", e_image), ("mask", e_mask)):
        if e.shape != (h, w):
            raise ProtocolError(f"{name} edge map {e.shape} does not match image {(h, w)}", request_id)
    fused = fuse_edge_maps(e_image, e_mask, alpha)
    raw = backends.complexity(image, request_id=f"{request_id}:complexity")
    c = min(max(float(raw), 0.0), 1.0)
    return GuideBundle(caption, fused, c, adaptive_strength(c, s_min, s_max), alpha)


def counterpart_request(
    image: bytes,
    guides: GuideBundle,
    seed: int,
    control_strength: float = DEFAULT_CONTROL_STRENGTH,
    steps: int = PROFILE_A["steps"],
    guidance: float = PROFILE_A["guidance"],
    request_id: str = "",
) -> GenerationRequest:
    h, w = png_size(image)
    return GenerationRequest(
        request_id=request_id,
        prompt=guides.caption,
        width=w,
        height=h,
        steps=steps,
        guidance=guidance,
        seed=seed,
        init_image=b64encode(image),
        denoise_strength=guides.strength,
        control_image=b64encode(gray_to_png(guides.fused_edges)),
        control_strength=control_strength,
        edge_alpha=guides.alpha,
    )


def generate_counterpart(image: bytes, guides: GuideBundle, backends: Backends, seed: int, **kwargs) -> bytes:
    request = counterpart_request(image, guides, seed, **kwargs)
    out = backends.img2img(request)
    if png_size(out) != png_size(image):
        raise ProtocolError(f"counterpart size {png_size(out)} differs from source {png_size(image)}", request.request_id)
    return out


def _prompt_box(ann: InstanceAnnotation, h: int, w: int) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = box_to_pixel_bounds(ann.bbox)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    return (float(x0), float(y0), float(max(x1 - x0, 0)), float(max(y1 - y0, 0)))


def sam_box_reannotate(
    aug_image: bytes,
    annotations: Sequence[InstanceAnnotation],
    backends: Backends,
    request_id: str = "",
) -> tuple[list[tuple[InstanceAnnotation, np.ndarray]], list[int]]:
    """Re-segment every source box on the counterpart.

    Returns ``(source annotation, refined mask)`` pairs for non-empty results and
    the ids of annotations dropped because their box came back empty.
    """
    if not annotations:
        return [], []
    h, w = png_size(aug_image)
    boxes = [_prompt_box(a, h, w) for a in annotations]
    masks = backends.segment_box(aug_image, boxes, request_id=f"{request_id}:segment-box")
    if len(masks) != len(annotations):
        raise ProtocolError(f"expected {len(annotations)} masks, got {len(masks)}", request_id)
    kept, dropped = [], []
    for ann, rle in zip(annotations, masks):
        if rle.size != (h, w):
            raise ProtocolError(f"mask size {rle.size} does not match image {(h, w)}", request_id)
        if rle.area == 0:
            log.info("annotation %s: box prompt returned an empty mask; dropped", ann.id)
            dropped.append(ann.id)
            continue
        kept.append((ann, rle_decode(rle)))
    return kept, dropped


def clip_score(aug_pixels: np.ndarray, mask: np.ndarray, text_embedding, backends: Backends, seed: int = 0, request_id: str = "") -> float:
    patch, _, _ = extract_instance_patch(aug_pixels, mask)
    return cosine(backends.embed_image(encode_png(patch), seed=seed, request_id=request_id), text_embedding)


def union_of(annotations: Sequence[InstanceAnnotation], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for a in annotations:
        if a.mask.size == shape:
            out |= a.decode()
    return out


def process_image(
    record: ImageRecord,
    dataset: Dataset,
    backends: Backends,
    cfg,
    seed: int,
    text_embeddings: Mapping[int, np.ndarray],
    out_dir: Path,
    embed_seed: int = 0,
) -> dict:
    rid = f"iagent:{record.id}"
    image = source_png(dataset.resolve_image_path(record))
    if png_size(image) != (record.height, record.width):
        raise ValueError(f"image {record.id}: file is {png_size(image)}, record says {(record.height, record.width)}")
    anns = dataset.annotations_for(record.id)
    guides = build_guides(
        image, union_of(anns, (record.height, record.width)), backends, cfg.alpha, cfg.s_min, cfg.s_max, request_id=rid
    )
    aug = generate_counterpart(
        image,
        guides,
        backends,
        derive_seed(seed, record.id),
        control_strength=cfg.control_strength,
        steps=cfg.steps,
        guidance=cfg.guidance,
        request_id=f"{rid}:img2img",
    )
    refined, dropped = sam_box_reannotate(aug, anns, backends, request_id=rid)
    aug_px = decode_png(aug, "RGB")
    masks = []
    for ann, mask in refined:
        masks.append(
            {
                "annotation_id": ann.id,
                "category_id": ann.category_id,
                "rle": rle_encode(mask).to_coco(),
                "bbox": list(mask_to_bbox(mask)),
                "clip_score": clip_score(
                    aug_px, mask, text_embeddings[ann.category_id], backends, embed_seed, f"{rid}:clip:{ann.id}"
                ),
            }
        )
    rel = f"images/{record.id}.png"
    atomic_write_bytes(out_dir / rel, aug)
    return {
        "image_id": record.id,
        "aug_image_path": rel,
        "caption": guides.caption,
        "complexity": guides.complexity,
        "strength": guides.strength,
        "masks": masks,
        "dropped": dropped,
    }


def filter_counterparts(results: Sequence[dict], k: float) -> tuple[list[dict], dict]:
    """Batch-wide proportional filtration over per-image item results (the barrier step)."""
    per_image, entries = score_batch(
        {r["image_id"]: [(m["annotation_id"], m["category_id"], m["clip_score"]) for m in r["masks"]] for r in results}
    )
    kept = proportional_select(entries, k) if entries else frozenset()
    threshold = proportional_threshold([e.p_bar for e in entries], k) if entries else None
    p_bars = {e.image_id: e.p_bar for e in entries}
    rows = []
    for r in results:
        iid = r["image_id"]
        rows.append(
            {
                "image_id": iid,
                "aug_image_path": r["aug_image_path"],
                "kept": iid in kept,
                "p_bar": p_bars.get(iid),
                "masks": [
                    {
                        "annotation_id": m["annotation_id"],
                        "category_id": m["category_id"],
                        "rle": m["rle"],
                        "clip_score": m["clip_score"],
                        "percentile": p,
                    }
                    for m, p in zip(r["masks"], per_image[iid])
                ],
            }
        )
    summary = {
        "k": k,
        "threshold": threshold,
        "scored_images": len(entries),
        "kept_images": len(kept),
        "observed_retention": (len(kept) / len(entries)) if entries else None,
        "dropped_annotations": sum(len(r["dropped"]) for r in results),
    }
    return rows, summary


def run_iagent(dataset: Dataset, backends: Backends, cfg, seed: int, checkpoint, out_dir: Path, fresh: bool, embed_seed: int = 0):
    """Run the image-conditioned stage; ``cfg`` is an :class:`~instada.orchestrator.config.IAgentConfig`."""
    out_dir = Path(out_dir)
    if fresh:
        shutil.rmtree(out_dir / "images", ignore_errors=True)
    text_embeddings = {
        c.id: backends.embed_text(cfg.clip_template.format(category=c.name), seed=embed_seed, request_id=f"iagent:text:{c.id}")
        for c in dataset.categories
    }
    items = [(str(im.id), im) for im in sorted(dataset.images, key=lambda im: im.id)]

    def worker(_item_id: str, record: ImageRecord) -> dict:
        return process_image(record, dataset, backends, cfg, seed, text_embeddings, out_dir, embed_seed)

    result = run_stage_items(checkpoint, "iagent", items, worker, out_dir, workers=cfg.workers, fresh=fresh)
    rows, summary = filter_counterparts([r for _, r in result.done_in_order()], cfg.k)
    write_jsonl(out_dir / "manifest.jsonl", rows)
    write_jsonl(
        out_dir / "scores.jsonl",
        [
            {"image_id": r["image_id"], "caption": r["caption"], "complexity": r["complexity"], "strength": r["strength"], "dropped": r["dropped"]}
            for _, r in result.done_in_order()
        ],
    )
    write_json(out_dir / "filtration.json", summary, indent=1)
    return result
