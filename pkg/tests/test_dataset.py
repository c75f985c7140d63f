import numpy as np
import pytest

from salmap.dataset import (
    CLASS_SPECS,
    AREA_BOUNDS,
    MaskRecord,
    filter_single_class,
    generate_dataset,
    generate_scene,
    load_image,
    load_mask,
    load_pairs,
    mask_records,
    read_manifest,
    save_image_png,
    save_mask_png,
    save_saliency_png,
)
from salmap.metrics import BinaryMask
from salmap.tensors import SaliencyMap


def test_thirteen_classes_with_distinct_specs():
    assert len(CLASS_SPECS) == 13
    assert len(set(CLASS_SPECS)) == 13
    shapes = {shape for shape, _ in CLASS_SPECS}
    assert shapes == {"disc", "square", "triangle", "ring"}


def test_scene_is_deterministic_per_seed():
    a = generate_scene(17)
    b = generate_scene(17)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.gt_mask.values, b.gt_mask.values)
    assert a.label == b.label
    c = generate_scene(18)
    assert not np.array_equal(a.image, c.image)


def test_scene_invariants_over_many_seeds():
    lo, hi = AREA_BOUNDS
    for seed in range(120):
        s = generate_scene(seed)
        assert s.image.shape == (1, 64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert 0 <= s.label < 13
        frac = s.gt_mask.area / (64 * 64)
        assert lo <= frac <= hi, (seed, frac)
        # the shape is strictly brighter than every background pixel, so
        # the ground truth is unambiguous at any noise level
        inside = s.image[0][s.gt_mask.values]
        outside = s.image[0][~s.gt_mask.values]
        assert inside.min() > outside.max(), seed


def test_all_classes_reachable():
    seen = set()
    for seed in range(400):
        seen.add(generate_scene(seed).label)
        if len(seen) == 13:
            break
    assert len(seen) == 13


def test_single_class_restriction():
    for seed in range(20):
        s = generate_scene(seed, class_ids=(5,))
        assert s.label == 5


def test_two_object_scene_masks_are_disjoint_and_labeled_first():
    for seed in range(30):
        s = generate_scene(seed, n_objects=2)
        assert s.union_mask is not None
        m1 = s.gt_mask.values
        union = s.union_mask.values
        m2 = union & ~m1
        assert m2.any()
        assert not (m1 & m2).any()
        assert s.label == s.meta["classes"][0]
        assert len(set(s.meta["classes"])) == 2


def test_small_canvas_still_works_and_tiny_canvas_rejected():
    s = generate_scene(3, image_size=16)
    assert s.image.shape == (1, 16, 16)
    with pytest.raises(ValueError):
        generate_scene(3, image_size=8)


def test_noise_level_bounds():
    with pytest.raises(ValueError):
        generate_scene(0, noise_level=1.0)
    quiet = generate_scene(5, noise_level=0.0)
    bg = quiet.image[0][~quiet.gt_mask.values]
    assert np.ptp(bg) == 0.0


def test_image_png_round_trip_quantization(tmp_path):
    s = generate_scene(9)
    p = tmp_path / "img.png"
    save_image_png(p, s.image)
    back = load_image(p)
    assert back.shape == s.image.shape
    # byte quantization: worst case half a step of 1/255
    assert np.max(np.abs(back - s.image)) <= 1.0 / 510.0 + 1e-12


def test_saliency_png_round_trip_quantization(tmp_path):
    values = np.linspace(0.0, 1.0, 64 * 64).reshape(64, 64)
    s = SaliencyMap(values)
    p = tmp_path / "s.png"
    save_saliency_png(p, s)
    back = load_image(p)[0]
    assert np.max(np.abs(back - values)) <= 1.0 / 510.0 + 1e-12


def test_mask_png_round_trip_is_exact(tmp_path):
    s = generate_scene(11)
    p = tmp_path / "m.png"
    save_mask_png(p, s.gt_mask)
    back = load_mask(p)
    assert np.array_equal(back.values, s.gt_mask.values)


def test_load_mask_from_tensor_file(tmp_path):
    from salmap.tensors import write_tensor, RawGrid

    vals = np.zeros((4, 4))
    vals[1:3, 1:3] = 0.7
    p = tmp_path / "m.npy"
    write_tensor(p, RawGrid(vals))
    back = load_mask(p)
    assert back.area == 4
    assert np.array_equal(back.values, vals != 0)


def test_filter_single_class_keeps_order():
    records = [
        MaskRecord(path="a", classes=frozenset({1}), pixel_counts={}),
        MaskRecord(path="b", classes=frozenset({1, 2}), pixel_counts={}),
        MaskRecord(path="c", classes=frozenset({3}), pixel_counts={}),
    ]
    kept = filter_single_class(records)
    assert [r.path for r in kept] == ["a", "c"]


def test_generate_dataset_layout_and_loading(tmp_path):
    manifest = generate_dataset(
        seed=1, count=6, out_dir=tmp_path, split="train", two_object_fraction=0.5
    )
    records = read_manifest(manifest)
    assert len(records) == 6
    assert [r["id"] for r in records] == [f"train-{i:05d}" for i in range(6)]
    for r in records:
        assert (tmp_path / r["image"]).exists()
        assert (tmp_path / r["mask"]).exists()
        assert r["seed"] != 1  # per-sample seeds are derived, not copied

    pairs = load_pairs(manifest)
    assert len(pairs) == 6
    assert pairs[0][0].shape == (1, 64, 64)

    recs = mask_records(manifest)
    multi = [r for r in recs if len(r.classes) > 1]
    single = filter_single_class(recs)
    assert len(multi) + len(single) == 6
    assert len(multi) >= 1  # fraction 0.5 over 6 draws makes this near-certain


def test_generate_dataset_is_deterministic(tmp_path):
    m1 = generate_dataset(seed=4, count=3, out_dir=tmp_path / "a", split="eval")
    m2 = generate_dataset(seed=4, count=3, out_dir=tmp_path / "b", split="eval")
    for r1, r2 in zip(read_manifest(m1), read_manifest(m2)):
        assert r1 == r2
        img1 = (m1.parent / r1["image"]).read_bytes()
        img2 = (m2.parent / r2["image"]).read_bytes()
        assert img1 == img2
