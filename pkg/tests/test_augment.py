import numpy as np
import pytest

from instada.annotations import Provenance, build_dataset, validate_dataset
from instada.augment import (
    EmptyPoolsError,
    InstancePool,
    PastePolicy,
    Placement,
    PoolBuildError,
    PoolEntry,
    augment_batch,
    build_pools,
    copy_paste_compose,
    sample_instances,
)
from instada.maskops import encode_png, rle_encode
from helpers import check_random_composition, entry, image_with


def test_policy_validation():
    for bad in (dict(n_min=3, n_max=2), dict(scale_range=(0, 1)), dict(scale_range=(2, 1)), dict(pool_mix=1.5), dict(occlusion_drop_ratio=-0.1)):
        with pytest.raises(ValueError):
            PastePolicy(**bad)


def test_pool_index_covers_entries():
    rng = np.random.default_rng(0)
    pool = InstancePool([entry(f"e{i}", rng, cat=i % 3) for i in range(9)])
    covered = sorted(i for idx in pool.by_category.values() for i in idx)
    assert covered == list(range(9))
    for cat, idx in pool.by_category.items():
        assert all(pool.entries[i].category_id == cat for i in idx)
    with pytest.raises(ValueError):
        pool.entries[0].patch[0, 0, 0] = 1


# --- pools -----------------------------------------------------------------------------


def tagent_rows(tmp_path, n, rng):
    rows = []
    (tmp_path / "t" / "patches").mkdir(parents=True)
    for i in range(n):
        e = entry(f"t{i}", rng)
        (tmp_path / "t" / "patches" / f"{i}.png").write_bytes(encode_png(e.patch))
        rows.append({"entry_id": e.entry_id, "category_id": 1, "patch_path": f"patches/{i}.png", "mask_rle": rle_encode(e.mask).to_coco()})
    return rows


def iagent_rows(tmp_path, toy, rng):
    rec = toy.images[0]
    (tmp_path / "i" / "images").mkdir(parents=True)
    (tmp_path / "i" / "images" / "1.png").write_bytes(encode_png(np.zeros((rec.height, rec.width, 3), np.uint8)))
    masks = []
    for j in range(3):
        m = np.zeros((rec.height, rec.width), bool)
        m[j * 5 : j * 5 + 3, 2:6] = True
        masks.append({"annotation_id": 100 + j, "category_id": 2, "rle": rle_encode(m).to_coco()})
    return [
        {"image_id": rec.id, "aug_image_path": "images/1.png", "kept": True, "masks": masks},
        {"image_id": 2, "aug_image_path": "images/2.png", "kept": False, "masks": masks},
    ]


def test_build_pools_union_counts(toy, tmp_path):
    rng = np.random.default_rng(1)
    synthetic, source = build_pools(tagent_rows(tmp_path, 6, rng), tmp_path / "t", iagent_rows(tmp_path, toy, rng), tmp_path / "i", toy)
    assert (len(synthetic), len(source)) == (6, len(toy.annotations) + 3)
    assert source.counts()[("iagent", 2)] == 3


def test_empty_iagent_manifest_means_original_only(toy, tmp_path):
    synthetic, source = build_pools([], None, [], None, toy)
    assert len(synthetic) == 0 and len(source) == len(toy.annotations)
    assert {e.provenance for e in source.entries} == {Provenance.ORIGINAL}


def test_duplicate_entry_ids_fail(toy, tmp_path):
    rows = tagent_rows(tmp_path, 2, np.random.default_rng(2))
    rows[1]["entry_id"] = rows[0]["entry_id"]
    with pytest.raises(PoolBuildError):
        build_pools(rows, tmp_path / "t", [], None, toy)


def test_missing_patch_skipped_and_reported(toy, tmp_path):
    from instada.augment import PoolReport

    rows = tagent_rows(tmp_path, 3, np.random.default_rng(3))
    (tmp_path / "t" / rows[1]["patch_path"]).unlink()
    report = PoolReport()
    synthetic, _ = build_pools(rows, tmp_path / "t", [], None, toy, report)
    assert len(synthetic) == 2 and report.skipped == ["t1"]


# --- sampling ------------------------------------------------------------------------------


def pools(rng):
    return (
        InstancePool([entry(f"s{i}", rng) for i in range(4)]),
        InstancePool([entry(f"o{i}", rng, prov=Provenance.ORIGINAL) for i in range(4)]),
    )


@pytest.mark.parametrize("mix,expected", [(1.0, True), (0.0, False)])
def test_pool_mix_boundaries(mix, expected):
    syn, src = pools(np.random.default_rng(0))
    placed = sample_instances(syn, src, PastePolicy(50, 50, pool_mix=mix), np.random.default_rng(1), (32, 32))
    assert all(p.synthetic is expected for p in placed)


def test_pool_mix_half_is_binomial():
    syn, src = pools(np.random.default_rng(0))
    placed = sample_instances(syn, src, PastePolicy(10**4, 10**4, pool_mix=0.5), np.random.default_rng(7), (32, 32))
    frac = sum(p.synthetic for p in placed) / len(placed)
    assert abs(frac - 0.5) <= 0.02


def test_sampling_in_bounds_and_deterministic():
    syn, src = pools(np.random.default_rng(0))
    policy = PastePolicy(1, 6, scale_range=(0.5, 3.0))
    a = sample_instances(syn, src, policy, np.random.default_rng(5), (10, 12))
    b = sample_instances(syn, src, policy, np.random.default_rng(5), (10, 12))
    assert a == b and 1 <= len(a) <= 6
    for p in a:
        assert 0 <= p.x and p.x + p.width <= 12 and 0 <= p.y and p.y + p.height <= 10
        assert 0.5 <= p.scale <= 3.0


def test_both_pools_empty():
    with pytest.raises(EmptyPoolsError):
        sample_instances(InstancePool(), InstancePool(), PastePolicy(), np.random.default_rng(0), (8, 8))


# --- composition ------------------------------------------------------------------------------


def test_paste_nothing_is_identity():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)
    m = np.zeros((6, 7), bool)
    m[1:3, 1:4] = True
    _, anns = image_with([m], 6, 7)
    comp = copy_paste_compose(px, anns, [])
    assert np.array_equal(comp.pixels, px)
    assert len(comp.layers) == 1 and np.array_equal(comp.layers[0].mask, m)


def test_full_cover_drops_existing():
    px = np.zeros((8, 8, 3), np.uint8)
    m = np.zeros((8, 8), bool)
    m[2:4, 2:4] = True
    _, anns = image_with([m], 8, 8)
    e = entry("big", np.random.default_rng(0), 6, 6)
    e = PoolEntry("big", 1, Provenance.TAGENT, e.patch | np.uint8(255), np.ones((6, 6), bool))
    comp = copy_paste_compose(px, anns, [Placement(e, 1, 1, 1.0, 6, 6, True)], 0.3)
    assert [l.source_entry for l in comp.layers] == ["big"]
    assert comp.dropped[0].annotation.id == 1


def test_overlap_reduces_earlier_paste_by_exact_overlap():
    px = np.zeros((10, 10, 3), np.uint8)
    sq = PoolEntry("sq", 1, Provenance.TAGENT, np.full((4, 4, 4), 255, np.uint8), np.ones((4, 4), bool))
    comp = copy_paste_compose(
        px, [], [Placement(sq, 0, 0, 1.0, 4, 4, True), Placement(sq, 2, 2, 1.0, 4, 4, True)], 0.0
    )
    first, second = comp.layers
    assert first.mask.sum() == 16 - 4 and second.mask.sum() == 16


def test_fuzzed_compositions_match_pixel_oracle():
    rng = np.random.default_rng(12345)
    for case in range(500):
        check_random_composition(rng, case)


# --- batch -------------------------------------------------------------------------------------


def test_batch_counts_and_determinism(toy):
    syn, src = build_pools([], None, [], None, toy)
    policy = PastePolicy(2, 2, seed=3)
    out, comps = augment_batch(toy, syn, src, policy)
    assert sum(len(c.log) for c in comps.values()) == 10
    pasted = [a for a in out.annotations if a.provenance == Provenance.PASTED]
    dropped_pasted = [l for c in comps.values() for l in c.dropped if l.annotation is None]
    assert len(pasted) + len(dropped_pasted) == 10
    assert all(a.source_entry and a.source_entry.startswith("o-") for a in pasted)
    assert validate_dataset(out) == []
    again, _ = augment_batch(toy, syn, src, policy)
    assert again == out


def test_unit_scale_on_empty_target_reproduces_pool_masks(toy):
    rng = np.random.default_rng(4)
    syn = InstancePool([entry("only", rng, 5, 6)])
    empty = build_dataset(toy.categories, toy.images, [], toy.source_path)
    out, comps = augment_batch(empty, syn, InstancePool(), PastePolicy(1, 1, scale_range=(1.0, 1.0)))
    for a in out.annotations:
        row = comps[a.image_id].log[0]
        x, y = row["position"]
        m = a.decode()
        assert np.array_equal(m[y : y + 5, x : x + 6], syn.entries[0].mask)
        assert m.sum() == syn.entries[0].mask.sum()
