"""Backend wrappers for scripting verdicts and simulating crashes, plus random test data."""
from __future__ import annotations

import threading

import numpy as np

from instada.annotations import (
    CategoryEntry,
    ImageRecord,
    InstanceAnnotation,
    Provenance,
    build_dataset,
    compute_frequency_groups,
    compute_image_counts,
    validate_dataset,
)
from instada.augment import Placement, PoolEntry, assemble_dataset, copy_paste_compose
from instada.backends.base import Backends, Exhausted
from oracles import ref_compose, ref_resize_nearest


class Delegating(Backends):
    def __init__(self, inner: Backends):
        self.inner = inner


def _forward(name):
    def method(self, *args, **kwargs):
        return getattr(self.inner, name)(*args, **kwargs)

    method.__name__ = name
    return method


for _name in ("llm", "generate", "img2img", "segment", "segment_box", "embed_image", "embed_text", "caption", "edge", "complexity"):
    setattr(Delegating, _name, _forward(_name))


def basis(dims: int, i: int) -> np.ndarray:
    v = np.zeros(dims)
    v[i] = 1.0
    return v


class ScriptedEmbedder(Delegating):
    """``embed_image`` returns vectors that pass or fail against template ``e0`` and centroid ``e1``.

    ``script`` entries: "keep", "text" (fails text only), "image" (fails image only), "both".
    """

    VECTORS = {
        "keep": np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0),
        "text": np.array([0.0, 1.0, 0.0]),
        "image": np.array([1.0, 0.0, 0.0]),
        "both": np.array([0.0, 0.0, 1.0]),
    }

    def __init__(self, inner: Backends, script):
        super().__init__(inner)
        self.script = list(script)
        self.calls = 0
        self.lock = threading.Lock()

    def embed_image(self, image, seed=0, request_id=""):
        with self.lock:
            kind = self.script[min(self.calls, len(self.script) - 1)]
            self.calls += 1
        return self.VECTORS[kind]


class CountingLLM(Delegating):
    def __init__(self, inner: Backends, fail_tasks=(), malformed_tasks=()):
        super().__init__(inner)
        self.fail_tasks = set(fail_tasks)
        self.malformed_tasks = set(malformed_tasks)
        self.calls: list[str] = []

    def llm(self, task, payload, request_id=""):
        self.calls.append(task)
        if task in self.fail_tasks:
            raise Exhausted(request_id, 3, "scripted")
        if task in self.malformed_tasks:
            return {"nonsense": True}
        return self.inner.llm(task, payload, request_id)


class Crash(BaseException):
    """Stands in for a process kill: not an Exception, so nothing swallows it."""


class CrashAfter(Delegating):
    """Raise :class:`Crash` (or ``Exhausted``) once ``method`` has been called ``n`` times."""

    def __init__(self, inner: Backends, method: str, n: int, exhausted: bool = False):
        super().__init__(inner)
        self.method, self.n, self.exhausted = method, n, exhausted
        self.count = 0
        self.lock = threading.Lock()
        setattr(self, method, self._wrapped(getattr(inner, method)))

    def _wrapped(self, fn):
        def call(*args, **kwargs):
            with self.lock:
                self.count += 1
                trip = self.count > self.n
            if trip:
                if self.exhausted:
                    raise Exhausted(kwargs.get("request_id", ""), 1, "scripted outage")
                raise Crash()
            return fn(*args, **kwargs)

        return call


# --- random data ---------------------------------------------------------------------------


def random_dataset(seed: int, max_images: int = 4):
    rng = np.random.default_rng(seed)
    n_cats = int(rng.integers(1, 4))
    cats = [CategoryEntry(i + 1, f"cat_{i}") for i in range(n_cats)]
    images, anns = [], []
    for i in range(int(rng.integers(1, max_images + 1))):
        h, w = int(rng.integers(3, 12)), int(rng.integers(3, 12))
        images.append(ImageRecord(i + 1, w, h, f"img/{i + 1}.png"))
        for _ in range(int(rng.integers(0, 3))):
            m = rng.random((h, w)) < 0.3
            if not m.any():
                m[0, 0] = True
            prov = [Provenance.ORIGINAL, Provenance.PASTED][int(rng.integers(0, 2))]
            anns.append(
                InstanceAnnotation.from_mask(
                    len(anns) + 1, i + 1, int(rng.integers(1, n_cats + 1)), m, prov, "e1" if prov == Provenance.PASTED else None
                )
            )
    return compute_frequency_groups(compute_image_counts(build_dataset(cats, images, anns)))


def entry(eid, rng, h=None, w=None, cat=1, prov=Provenance.TAGENT):
    h = h or int(rng.integers(1, 8))
    w = w or int(rng.integers(1, 8))
    mask = rng.random((h, w)) < 0.7
    mask[rng.integers(0, h), rng.integers(0, w)] = True
    patch = rng.integers(0, 256, (h, w, 4), dtype=np.uint8)
    patch[..., 3] = np.where(mask, 255, 0)
    return PoolEntry(eid, cat, prov, patch, mask)


def image_with(masks, h, w):
    anns = [InstanceAnnotation.from_mask(i + 1, 1, 1, m) for i, m in enumerate(masks)]
    ds = build_dataset([CategoryEntry(1, "a")], [ImageRecord(1, w, h, "x.png")], anns)
    return ds, anns


def check_random_composition(rng: np.random.Generator, case: int = 0) -> None:
    """One fuzzed composition, checked pixel by pixel against the reference compositor."""
    h, w = int(rng.integers(4, 14)), int(rng.integers(4, 14))
    labels = rng.integers(0, 4, (h, w))
    existing = [labels == k for k in range(1, 4) if (labels == k).any()]
    ds, anns = image_with(existing, h, w)
    px = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    placements, paste_masks = [], []
    for j in range(int(rng.integers(0, 5))):
        e = entry(f"e{j}", rng)
        ph, pw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        x, y = int(rng.integers(0, w - pw + 1)), int(rng.integers(0, h - ph + 1))
        placements.append(Placement(e, x, y, 1.0, ph, pw, True))
        full = np.zeros((h, w), bool)
        full[y : y + ph, x : x + pw] = ref_resize_nearest(e.mask, ph, pw)
        paste_masks.append(full)
    ratio = float(rng.random())
    comp = copy_paste_compose(px, anns, placements, ratio)
    owner, survivors = ref_compose(h, w, existing, paste_masks, ratio)

    # z-order and drop rule: surviving layers are exactly the oracle's, in order
    assert [l.mask.tolist() for l in comp.layers] == [(owner == i).tolist() for i in survivors], case
    # single ownership
    stack = np.zeros((h, w), int)
    for l in comp.layers:
        stack += l.mask
    assert stack.max() <= 1, case
    # pixels come from the topmost paste, or the target where no paste landed
    for i, p in enumerate(placements, start=len(existing)):
        own = owner == i
        canvas = np.zeros((h, w, 3), np.uint8)
        canvas[p.y : p.y + p.height, p.x : p.x + p.width] = ref_resize_nearest(p.entry.patch, p.height, p.width)[..., :3]
        assert np.array_equal(comp.pixels[own], canvas[own]), case
    untouched = owner < len(existing)
    assert np.array_equal(comp.pixels[untouched], px[untouched]), case
    assert validate_dataset(assemble_dataset(ds, {1: comp}, {})) == [], case
