"""Deterministic seeded stand-ins for every model service.

The mock world draws flat-coloured rectangles and ellipses. Each category in
the vocabulary owns a unique saturated colour; backgrounds are always gray, so
colours identify categories even after cropping. Rendered PNGs carry their
shape list in a text chunk, which lets the segmenters return exactly the
shapes the generator drew.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..maskops import RleMask, box_mask, decode_png, encode_png, png_shapes, rle_encode
from ..seeding import derive_seed, rng_for, stable_hash
from .base import Backends
from .protocol import GenerationRequest, b64decode

DEFAULT_TAXONOMY: dict[str, list[str]] = {
    "viewpoint": ["front view", "top-down view", "low angle"],
    "lighting": ["soft daylight", "studio lighting", "golden hour"],
    "background": ["kitchen counter", "grass field", "plain wall"],
    "material": ["glossy", "matte", "weathered"],
    "pose": ["upright", "tilted", "partially occluded"],
    "weather": ["clear", "overcast", "light rain"],
}


def _normalize_name(name: str) -> str:
    return name.replace("_", " ").strip().lower()


def rasterize_shape(shape: dict, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = shape["x0"], shape["y0"], shape["x1"], shape["y1"]
    out = np.zeros((height, width), dtype=bool)
    if shape["kind"] == "rect":
        out[max(0, y0) : min(height, y1), max(0, x0) : min(width, x1)] = True
        return out
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    rx, ry = max((x1 - x0) / 2.0, 0.5), max((y1 - y0) / 2.0, 0.5)
    ys, xs = np.mgrid[0:height, 0:width]
    out[:] = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    return out


def visible_masks(shapes: Sequence[dict], height: int, width: int) -> list[np.ndarray]:
    """Per-shape visible masks; later shapes are drawn over earlier ones."""
    masks = [rasterize_shape(s, height, width) for s in shapes]
    covered = np.zeros((height, width), dtype=bool)
    out: list[np.ndarray] = [None] * len(masks)  # type: ignore[list-item]
    for i in range(len(masks) - 1, -1, -1):
        out[i] = masks[i] & ~covered
        covered |= masks[i]
    return out


def gray_background(height: int, width: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    top, bottom = rng.integers(40, 215, size=2)
    ramp = np.linspace(float(top), float(bottom), height, dtype=np.float64)
    level = np.rint(ramp).astype(np.uint8)[:, None]
    return np.repeat(np.repeat(level, width, axis=1)[:, :, None], 3, axis=2)


def paint(canvas: np.ndarray, shapes: Sequence[dict]) -> np.ndarray:
    out = canvas.copy()
    h, w = out.shape[:2]
    for s in shapes:
        out[rasterize_shape(s, h, w)] = s["color"]
    return out


@dataclass(frozen=True)
class MockWorld:
    vocabulary: tuple[str, ...]
    seed: int = 0
    dims: int = 64
    similarity_floor: float = 0.7
    defect_rate: float = 0.0
    max_shift: int = 0
    erase_rate: float = 0.0
    box_margin: int = 4
    shapes_per_image: int = 1
    taxonomy: dict[str, list[str]] = field(default_factory=lambda: dict(DEFAULT_TAXONOMY))

    def __post_init__(self):
        if not 0.0 <= self.similarity_floor < 1.0:
            raise ValueError("similarity_floor must lie in [0, 1)")
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))

    # --- categories and colours -------------------------------------------------

    @cached_property
    def palette(self) -> dict[str, tuple[int, int, int]]:
        colors: dict[str, tuple[int, int, int]] = {}
        used: set[tuple[int, int, int]] = set()
        for name in self.vocabulary:
            salt = 0
            while True:
                c = self._saturated_color(("palette", name, salt))
                if c not in used:
                    break
                salt += 1
            colors[name] = c
            used.add(c)
        return colors

    @cached_property
    def color_to_category(self) -> dict[tuple[int, int, int], str]:
        return {c: n for n, c in self.palette.items()}

    @staticmethod
    def _saturated_color(key) -> tuple[int, int, int]:
        rng = rng_for("color", *key)
        c = rng.integers(0, 256, size=3)
        hi = int(rng.integers(0, 3))
        lo = (hi + 1 + int(rng.integers(0, 2))) % 3
        c[hi] = max(int(c[hi]), 170)
        c[lo] = min(int(c[lo]), 80)
        return (int(c[0]), int(c[1]), int(c[2]))

    def defect_color(self, seed: int) -> tuple[int, int, int]:
        salt = 0
        while True:
            c = self._saturated_color(("defect", seed, salt))
            if c not in self.color_to_category:
                return c
            salt += 1

    @cached_property
    def _name_patterns(self) -> list[tuple[str, re.Pattern]]:
        names = sorted(self.vocabulary, key=lambda n: (-len(_normalize_name(n)), n))
        return [
            (n, re.compile(r"(?<![a-z0-9])" + re.escape(_normalize_name(n)) + r"(?![a-z0-9])"))
            for n in names
        ]

    def find_category(self, text: str) -> str | None:
        t = _normalize_name(text)
        for name, pat in self._name_patterns:
            if pat.search(t):
                return name
        return None

    # --- embeddings -------------------------------------------------------------

    def category_axis(self, token: str) -> np.ndarray:
        v = rng_for("axis", self.seed, token).standard_normal(self.dims)
        return v / np.linalg.norm(v)

    def compose_embedding(self, token: str | None, noise_key: Sequence[Any]) -> np.ndarray:
        """Unit vector whose pairwise cosine within a category is at least ``similarity_floor``.

        With share ``rho = (1 + floor) / 2`` on the category axis and the rest on a
        noise direction orthogonal to it, two same-category vectors have cosine
        ``rho + (1 - rho) * <w1, w2> >= 2 * rho - 1 = floor``.
        """
        w = rng_for("noise", *noise_key).standard_normal(self.dims)
        if token is None:
            return w / np.linalg.norm(w)
        u = self.category_axis(token)
        w = w - np.dot(w, u) * u
        w /= np.linalg.norm(w)
        rho = (1.0 + self.similarity_floor) / 2.0
        v = np.sqrt(rho) * u + np.sqrt(1.0 - rho) * w
        return v / np.linalg.norm(v)

    def dominant_category(self, rgba: np.ndarray) -> str | None:
        considered = rgba[..., 3] > 0
        n = int(np.count_nonzero(considered))
        if n == 0:
            return None
        counts = self._category_pixel_counts(rgba[..., :3], considered)
        if not counts:
            return None
        name, best = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
        return name if best * 2 >= n else None

    def _category_pixel_counts(self, rgb: np.ndarray, where: np.ndarray) -> dict[str, int]:
        px = rgb[where].astype(np.int64)
        if px.size == 0:
            return {}
        packed = (px[:, 0] << 16) | (px[:, 1] << 8) | px[:, 2]
        values, counts = np.unique(packed, return_counts=True)
        out: dict[str, int] = {}
        for v, c in zip(values.tolist(), counts.tolist()):
            name = self.color_to_category.get(((v >> 16) & 255, (v >> 8) & 255, v & 255))
            if name is not None:
                out[name] = out.get(name, 0) + int(c)
        return out

    # --- rendering --------------------------------------------------------------

    def place_shape(self, rng: np.random.Generator, height: int, width: int, color, category) -> dict:
        lo = max(2, int(0.3 * min(height, width)))
        hi = max(lo + 1, int(0.6 * min(height, width)))
        sw, sh = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
        sw, sh = min(sw, width), min(sh, height)
        x0 = int(rng.integers(0, width - sw + 1))
        y0 = int(rng.integers(0, height - sh + 1))
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        return {
            "kind": kind,
            "x0": x0,
            "y0": y0,
            "x1": x0 + sw,
            "y1": y0 + sh,
            "color": list(color),
            "category": category,
        }

    def render_text2image(self, prompt: str, seed: int, width: int, height: int) -> bytes:
        token = self.find_category(prompt)
        rng = rng_for("generate", self.seed, prompt, seed)
        shapes = []
        for _ in range(self.shapes_per_image):
            defect = token is None or rng.random() < self.defect_rate
            if defect:
                color, cat = self.defect_color(int(rng.integers(0, 2**62))), None
            else:
                color, cat = self.palette[token], token
            shapes.append(self.place_shape(rng, height, width, color, cat))
        bg = gray_background(height, width, int(rng.integers(0, 2**62)))
        return encode_png(paint(bg, shapes), shapes)

    def render_img2img(self, init: bytes, prompt: str, seed: int, strength: float) -> bytes:
        if strength == 0.0:
            return init
        base_px = decode_png(init, "RGB")
        h, w = base_px.shape[:2]
        shapes = png_shapes(init) or []
        rng = rng_for("img2img", self.seed, prompt, seed)
        moved = []
        for s in shapes:
            erase = rng.random() < self.erase_rate
            dx, dy = (int(v) for v in rng.integers(-self.max_shift, self.max_shift + 1, size=2))
            if erase:
                continue
            dx = min(max(dx, -s["x0"]), w - s["x1"])
            dy = min(max(dy, -s["y0"]), h - s["y1"])
            moved.append({**s, "x0": s["x0"] + dx, "x1": s["x1"] + dx, "y0": s["y0"] + dy, "y1": s["y1"] + dy})
        bg = gray_background(h, w, int(rng.integers(0, 2**62)))
        blend = np.rint((1.0 - strength) * base_px.astype(np.float64) + strength * bg.astype(np.float64))
        return encode_png(paint(blend.astype(np.uint8), moved), moved)

    def true_masks(self, image: bytes) -> list[np.ndarray]:
        shapes = png_shapes(image)
        px = decode_png(image, "RGB")
        h, w = px.shape[:2]
        if shapes is None:
            # no shape record: treat every non-gray pixel as one object
            nongray = (px[..., 0] != px[..., 1]) | (px[..., 1] != px[..., 2])
            return [nongray] if nongray.any() else []
        return visible_masks(shapes, h, w)


def edge_map(rgb: np.ndarray) -> np.ndarray:
    """Gradient magnitude normalised to [0, 1] and quantised to 8 bits."""
    g = rgb.astype(np.float64).mean(axis=2) if rgb.ndim == 3 else rgb.astype(np.float64)
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:, 1:-1] = (g[:, 2:] - g[:, :-2]) / 2.0
    gy[1:-1, :] = (g[2:, :] - g[:-2, :]) / 2.0
    mag = np.hypot(gx, gy)
    peak = mag.max() if mag.size else 0.0
    if peak > 0:
        mag = mag / peak
    return (np.rint(mag * 255.0) / 255.0).astype(np.float32)


class MockBackends(Backends):
    def __init__(self, world: MockWorld):
        self.world = world

    def llm(self, task: str, payload: dict[str, Any], request_id: str = "") -> dict[str, Any]:
        if task == "elements":
            return {"axes": {k: list(v) for k, v in self.world.taxonomy.items()}}
        category = str(payload["category"])
        combo = payload.get("combination") or {}
        details = ", ".join(f"{axis}: {value}" for axis, value in combo.items())
        if task == "prompts":
            return {"text": f"a photo of a {category}, {details}" if details else f"a photo of a {category}"}
        if task == "rethink":
            n = len(payload.get("lineage") or [])
            return {"text": f"a realistic {category} (revision {n}), {details}"}
        raise ValueError(f"unknown llm task {task!r}")

    def generate(self, request: GenerationRequest) -> bytes:
        if request.init_image is not None:
            return self.img2img(request)
        return self.world.render_text2image(request.prompt, request.seed, request.width, request.height)

    def img2img(self, request: GenerationRequest) -> bytes:
        if request.init_image is None:
            return self.world.render_text2image(request.prompt, request.seed, request.width, request.height)
        return self.world.render_img2img(
            b64decode(request.init_image), request.prompt, request.seed, float(request.denoise_strength)
        )

    def segment(self, image: bytes, request_id: str = "") -> np.ndarray:
        masks = self.world.true_masks(image)
        h, w = decode_png(image, "L").shape
        union = np.zeros((h, w), dtype=bool)
        for m in masks:
            union |= m
        return union.astype(np.float32)

    def segment_box(self, image: bytes, boxes: Sequence[Sequence[float]], request_id: str = "") -> list[RleMask]:
        masks = self.world.true_masks(image)
        h, w = decode_png(image, "L").shape
        out = []
        for box in boxes:
            x, y, bw, bh = (float(v) for v in box)
            if x < 0 or y < 0 or bw < 0 or bh < 0 or x + bw > w + 1e-6 or y + bh > h + 1e-6:
                raise ValueError(f"box {list(box)} outside image bounds {w}x{h}")
            region = box_mask(box, (h, w))
            overlaps = [int(np.count_nonzero(m & region)) for m in masks]
            best = max(range(len(masks)), key=lambda i: (overlaps[i], -i), default=None)
            if best is None or overlaps[best] == 0:
                out.append(rle_encode(np.zeros((h, w), dtype=bool)))
                continue
            out.append(rle_encode(masks[best] & box_mask(box, (h, w), self.world.box_margin)))
        return out

    def embed_image(self, image: bytes, seed: int = 0, request_id: str = "") -> np.ndarray:
        rgba = decode_png(image, "RGBA")
        token = self.world.dominant_category(rgba)
        return self.world.compose_embedding(token, ("image", stable_hash(rgba.tobytes() + bytes(str(rgba.shape), "ascii")), seed))

    def embed_text(self, text: str, seed: int = 0, request_id: str = "") -> np.ndarray:
        return self.world.compose_embedding(self.world.find_category(text), ("text", text, seed))

    def caption(self, image: bytes, request_id: str = "") -> str:
        px = decode_png(image, "RGB")
        counts = self.world._category_pixel_counts(px, np.ones(px.shape[:2], dtype=bool))
        names = sorted(n for n, c in counts.items() if c >= 4)
        if not names:
            return "a photo of a scene"
        return "a photo of " + " and ".join(f"a {n}" for n in names)

    def edge(self, image: bytes, request_id: str = "") -> np.ndarray:
        return edge_map(decode_png(image, "RGB"))

    def complexity(self, image: bytes, request_id: str = "") -> float:
        e = self.edge(image)
        return float(np.clip(np.count_nonzero(e > 0.1) / max(e.size, 1), 0.0, 1.0))


# --- toy datasets ---------------------------------------------------------------


def make_toy_dataset(
    out_dir: str | Path,
    n_images: int = 5,
    categories: Sequence[str] = ("apple", "banana", "cup"),
    size: tuple[int, int] = (96, 128),
    max_shapes: int = 3,
    seed: int = 0,
    gap: int = 8,
) -> Path:
    """Write a small COCO/LVIS dataset of mock-world images; returns the JSON path.

    Shapes are placed without overlap (``gap`` pixels apart) and categories are
    assigned round-robin so every category appears at least once when
    ``n_images * max_shapes >= len(categories)``.
    """
    from ..annotations import (
        CategoryEntry,
        ImageRecord,
        InstanceAnnotation,
        build_dataset,
        compute_frequency_groups,
        compute_image_counts,
        save_dataset,
    )

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    world = MockWorld(vocabulary=tuple(categories), seed=seed)
    h, w = size
    cats = [CategoryEntry(id=i + 1, name=n) for i, n in enumerate(categories)]
    images, anns = [], []
    next_cat = 0
    for img_idx in range(n_images):
        rng = rng_for("toy", seed, img_idx)
        n_shapes = 1 + (img_idx % max_shapes) if max_shapes > 0 else 0
        shapes: list[dict] = []
        occupied = np.zeros((h, w), dtype=bool)
        for _ in range(n_shapes):
            name = categories[next_cat % len(categories)]
            for _try in range(50):
                s = world.place_shape(rng, h, w, world.palette[name], name)
                grown = box_mask((s["x0"], s["y0"], s["x1"] - s["x0"], s["y1"] - s["y0"]), (h, w), gap)
                if not (grown & occupied).any():
                    shapes.append(s)
                    occupied |= grown
                    next_cat += 1
                    break
        bg = gray_background(h, w, derive_seed("toy-bg", seed, img_idx))
        fname = f"images/{img_idx + 1:06d}.png"
        (out_dir / fname).write_bytes(encode_png(paint(bg, shapes), shapes))
        image_id = img_idx + 1
        images.append(ImageRecord(id=image_id, width=w, height=h, file_path=fname))
        for s, m in zip(shapes, visible_masks(shapes, h, w)):
            if m.any():
                anns.append(
                    InstanceAnnotation.from_mask(
                        id=len(anns) + 1,
                        image_id=image_id,
                        category_id=categories.index(s["category"]) + 1,
                        mask=m,
                    )
                )
    path = out_dir / "dataset.json"
    d = build_dataset(cats, images, anns, str(path))
    d = compute_frequency_groups(compute_image_counts(d))
    save_dataset(d, path)
    return path


def world_from_config(vocabulary: Sequence[str], settings: dict[str, Any] | None = None) -> MockWorld:
    settings = dict(settings or {})
    return MockWorld(vocabulary=tuple(vocabulary), **settings)

