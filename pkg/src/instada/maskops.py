"""Binary mask arithmetic and raster interchange.

Masks are plain ``numpy`` boolean arrays of shape ``(H, W)``. The storage and
wire form is :class:`RleMask`, using the COCO convention: column-major runs that
start with a (possibly empty) run of zeros, with the compressed ``counts``
string encoding used by COCO/LVIS annotation files.

Grayscale maps (edge maps) are ``float32`` arrays with values in ``[0, 1]``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, PngImagePlugin

Bbox = tuple[int, int, int, int]

SHAPES_PNG_KEY = "instada:shapes"


class MaskError(ValueError):
    pass


class EmptyMaskError(MaskError):
    pass


class MaskFormatError(MaskError):
    pass


class DimensionMismatchError(MaskError):
    pass


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        h, w = self.size
        if h <= 0 or w <= 0:
            raise MaskFormatError(f"invalid RLE size {self.size}")
        if any(c < 0 for c in self.counts):
            raise MaskFormatError("negative run length in RLE counts")
        if any(c == 0 for c in self.counts[1:]):
            raise MaskFormatError("only the first RLE run may be zero")
        if sum(self.counts) != h * w:
            raise MaskFormatError(
                f"RLE counts sum to {sum(self.counts)}, expected {h * w} for size {self.size}"
            )

    @property
    def height(self) -> int:
        return self.size[0]

    @property
    def width(self) -> int:
        return self.size[1]

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def to_coco(self) -> dict:
        return {"size": [self.size[0], self.size[1]], "counts": rle_to_string(self.counts)}

    @classmethod
    def from_coco(cls, obj: dict) -> "RleMask":
        try:
            h, w = (int(v) for v in obj["size"])
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MaskFormatError(f"malformed RLE object: {exc}") from exc
        if isinstance(counts, (bytes, str)):
            if isinstance(counts, bytes):
                counts = counts.decode("ascii")
            runs = rle_from_string(counts)
        else:
            runs = [int(c) for c in counts]
        return cls((h, w), _canonical_runs(runs))


def _canonical_runs(runs: Sequence[int]) -> tuple[int, ...]:
    # merge zero-length interior runs so uncompressed inputs from other tools normalise
    merged: list[list[int]] = []  # [value, length]
    for i, c in enumerate(runs):
        if c < 0:
            raise MaskFormatError("negative run length in RLE counts")
        if c == 0:
            continue
        value = i % 2
        if merged and merged[-1][0] == value:
            merged[-1][1] += c
        else:
            merged.append([value, c])
    out = [length for _, length in merged]
    if not merged or merged[0][0] == 1:
        out.insert(0, 0)
    return tuple(out)


def rle_to_string(counts: Sequence[int]) -> str:
    """COCO LEB128-like compressed counts string (matches pycocotools ``rleToString``)."""
    out = bytearray()
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(c + 48)
    return out.decode("ascii")


def rle_from_string(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    n = len(s)
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise MaskFormatError("truncated RLE counts string")
            c = ord(s[p]) - 48
            if c < 0 or c > 63:
                raise MaskFormatError(f"invalid character {s[p]!r} in RLE counts string")
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


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise MaskFormatError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return RleMask((h, w), tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return flat.reshape((w, h)).T.copy()


def popcount(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def mask_to_bbox(mask: np.ndarray) -> Bbox:
    """Tight ``(x, y, w, h)`` box around the set pixels."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyMaskError("cannot take the bounding box of an empty mask")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    _check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(a & b)) / float(union)


def subtract_mask(base: np.ndarray, occluder: np.ndarray) -> np.ndarray:
    _check_same_shape(base, occluder)
    return np.asarray(base, dtype=bool) & ~np.asarray(occluder, dtype=bool)


def union_masks(masks: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        _check_same_shape(out, m)
        out |= m
    return out


def box_mask(box: Sequence[float], shape: tuple[int, int], margin: int = 0) -> np.ndarray:
    """Boolean raster of an ``(x, y, w, h)`` box, grown by ``margin`` and clipped to ``shape``."""
    h, w = shape
    x0, y0, x1, y1 = box_to_pixel_bounds(box)
    x0, y0 = max(0, x0 - margin), max(0, y0 - margin)
    x1, y1 = min(w, x1 + margin), min(h, y1 + margin)
    out = np.zeros(shape, dtype=bool)
    if x1 > x0 and y1 > y0:
        out[y0:y1, x0:x1] = True
    return out


def box_to_pixel_bounds(box: Sequence[float]) -> tuple[int, int, int, int]:
    """Outward-rounded half-open pixel bounds ``(x0, y0, x1, y1)`` of a float box."""
    x, y, bw, bh = (float(v) for v in box)
    return (int(np.floor(x)), int(np.floor(y)), int(np.ceil(x + bw)), int(np.ceil(y + bh)))


def fuse_edge_maps(e_image: np.ndarray, e_mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Pixelwise ``alpha * e_image + (1 - alpha) * e_mask``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_same_shape(e_image, e_mask)
    a = np.asarray(e_image, dtype=np.float32)
    b = np.asarray(e_mask, dtype=np.float32)
    for name, m in (("e_image", a), ("e_mask", b)):
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise ValueError(f"{name} values must be normalised to [0, 1]")
    if alpha == 1.0:
        return a.copy()
    if alpha == 0.0:
        return b.copy()
    out = np.float32(alpha) * a + np.float32(1.0 - alpha) * b
    return np.clip(out, 0.0, 1.0)


def extract_instance_patch(
    image: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, Bbox]:
    """Crop ``image`` to the mask's box; the returned RGBA patch carries the mask as alpha."""
    if image.shape[:2] != mask.shape:
        raise DimensionMismatchError(f"image {image.shape[:2]} vs mask {mask.shape}")
    x, y, w, h = mask_to_bbox(mask)
    local = np.asarray(mask[y : y + h, x : x + w], dtype=bool).copy()
    rgb = np.asarray(image[y : y + h, x : x + w, :3], dtype=np.uint8)
    patch = np.empty((h, w, 4), dtype=np.uint8)
    patch[..., :3] = rgb
    patch[..., 3] = np.where(local, 255, 0)
    return patch, local, (x, y, w, h)


def polygons_to_mask(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        pts = [(float(poly[i]), float(poly[i + 1])) for i in range(0, len(poly) - 1, 2)]
        if len(pts) >= 3:
            draw.polygon(pts, fill=1, outline=1)
    return np.array(canvas, dtype=bool)


def resize_nearest(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    src_h, src_w = arr.shape[:2]
    rows = np.minimum((np.arange(height) * src_h) // height, src_h - 1)
    cols = np.minimum((np.arange(width) * src_w) // width, src_w - 1)
    return arr[rows][:, cols]


# --- raster interchange -----------------------------------------------------


def encode_png(pixels: np.ndarray, shapes: list | None = None) -> bytes:
    """Encode a uint8 gray/RGB/RGBA array as PNG; ``shapes`` rides along as a text chunk."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    img = Image.fromarray(pixels)
    info = None
    if shapes is not None:
        info = PngImagePlugin.PngInfo()
        info.add_text(SHAPES_PNG_KEY, json.dumps(shapes, separators=(",", ":"), sort_keys=True))
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info, compress_level=6)
    return buf.getvalue()


def decode_png(data: bytes, mode: str | None = "RGB") -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        if mode is not None and img.mode != mode:
            img = img.convert(mode)
        return np.array(img)


def png_shapes(data: bytes) -> list | None:
    with Image.open(io.BytesIO(data)) as img:
        raw = getattr(img, "text", {}).get(SHAPES_PNG_KEY)
    return json.loads(raw) if raw is not None else None


def png_size(data: bytes) -> tuple[int, int]:
    """``(height, width)`` without decoding pixels."""
    with Image.open(io.BytesIO(data)) as img:
        return img.height, img.width


def gray_to_png(values: np.ndarray) -> bytes:
    v = np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0)
    return encode_png(np.rint(v * 255.0).astype(np.uint8))


def png_to_gray(data: bytes) -> np.ndarray:
    return decode_png(data, mode="L").astype(np.float32) / np.float32(255.0)


def mask_to_png(mask: np.ndarray) -> bytes:
    return encode_png(np.where(mask, 255, 0).astype(np.uint8))
