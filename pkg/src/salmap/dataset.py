"""Synthetic scenes with exact ground-truth masks, plus image/mask file I/O.

Scenes are textured geometric shapes (disc, square, triangle, ring) on a
noisy background. Thirteen shape-texture classes, 64x64 grayscale by
default; shape pixels are always strictly brighter than the background so
the ground truth is unambiguous. Generation is deterministic per seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

from .metrics import BinaryMask
from .rng import CounterStream, derive_key, unit_value
from .tensors import RawGrid, SaliencyMap, read_tensor

SHAPES = ("disc", "square", "triangle", "ring")
TEXTURES = ("solid", "hstripes", "vstripes", "checker")

# 13 shape-texture classes: every texture for disc/square/triangle, plus a
# solid ring
CLASS_SPECS = tuple(
    (shape, texture) for shape in ("disc", "square", "triangle") for texture in TEXTURES
) + (("ring", "solid"),)

AREA_BOUNDS = (0.05, 0.40)  # admissible mask area as a fraction of the canvas
_BG_BASE = 0.1
_TEXTURE_LO = 0.6
_TEXTURE_HI = 1.0


@dataclass(frozen=True, eq=False)
class SceneSample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    gt_mask: BinaryMask
    union_mask: Union[BinaryMask, None]
    meta: dict

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] not in (1, 3):
            raise ValueError(f"image must be (1|3, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.gt_mask.values.shape:
            raise ValueError("mask dims must equal image dims")
        if self.gt_mask.area == 0:
            raise ValueError("ground-truth mask is empty")


@dataclass(frozen=True)
class MaskRecord:
    path: str
    classes: frozenset
    pixel_counts: dict

    def __post_init__(self):
        if not self.classes:
            raise ValueError("a mask record needs at least one class")


def filter_single_class(records: Sequence[MaskRecord]) -> list[MaskRecord]:
    """Keep only masks containing exactly one class; order preserved."""
    return [record for record in records if len(record.classes) == 1]


def _texture(texture: str, h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if texture == "solid":
        return np.full((h, w), 0.9)
    if texture == "hstripes":
        return np.where((ii // 2) % 2 == 0, _TEXTURE_HI, _TEXTURE_LO)
    if texture == "vstripes":
        return np.where((jj // 2) % 2 == 0, _TEXTURE_HI, _TEXTURE_LO)
    if texture == "checker":
        return np.where((ii // 4 + jj // 4) % 2 == 0, _TEXTURE_HI, _TEXTURE_LO)
    raise ValueError(f"unknown texture {texture!r}")


def _rasterize(shape: str, ci: float, cj: float, size: float, h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    di, dj = ii - ci, jj - cj
    if shape == "disc":
        return di * di + dj * dj <= size * size
    if shape == "square":
        half = size / 2.0
        return (np.abs(di) <= half) & (np.abs(dj) <= half)
    if shape == "triangle":
        # isoceles, apex up: base width == height == size
        top = -size / 2.0
        inside_rows = (di >= top) & (di <= size / 2.0)
        halfwidth = (di - top) / 2.0
        return inside_rows & (np.abs(dj) <= halfwidth)
    if shape == "ring":
        d2 = di * di + dj * dj
        return (d2 <= size * size) & (d2 > (0.6 * size) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _size_for_fraction(shape: str, fraction: float, h: int, w: int) -> float:
    area = fraction * h * w
    if shape == "disc":
        return float(np.sqrt(area / np.pi))
    if shape == "square":
        return float(np.sqrt(area))
    if shape == "triangle":
        return float(np.sqrt(2.0 * area))
    if shape == "ring":
        return float(np.sqrt(area / (np.pi * (1.0 - 0.36))))
    raise ValueError(f"unknown shape {shape!r}")


def _extent(shape: str, size: float) -> int:
    if shape in ("disc", "ring"):
        return int(np.ceil(size)) + 1
    return int(np.ceil(size / 2.0)) + 1


def _place_shape(
    stream: CounterStream,
    shape: str,
    h: int,
    w: int,
    fraction_range: tuple[float, float],
    forbidden: Union[np.ndarray, None],
) -> tuple[np.ndarray, dict]:
    lo, hi = fraction_range
    for _ in range(200):
        fraction = lo + stream.next_unit() * (hi - lo)
        size = _size_for_fraction(shape, fraction, h, w)
        extent = _extent(shape, size)
        if 2 * extent + 1 > min(h, w):
            raise ValueError(f"{shape} of size {size:.1f} is larger than the {h}x{w} canvas")
        ci = extent + stream.next_below(h - 2 * extent)
        cj = extent + stream.next_below(w - 2 * extent)
        mask = _rasterize(shape, ci, cj, size, h, w)
        area_fraction = mask.sum() / (h * w)
        if not AREA_BOUNDS[0] <= area_fraction <= AREA_BOUNDS[1]:
            continue
        if forbidden is not None and (mask & forbidden).any():
            continue
        return mask, {"shape": shape, "center": [int(ci), int(cj)], "size": size,
                      "area_fraction": float(area_fraction)}
    # random placement can starve when the free area is cornered; fall back
    # to the smallest admissible size and scan centers in row-major order
    size = _size_for_fraction(shape, lo, h, w)
    extent = _extent(shape, size)
    for ci in range(extent, h - extent):
        for cj in range(extent, w - extent):
            mask = _rasterize(shape, float(ci), float(cj), size, h, w)
            area_fraction = mask.sum() / (h * w)
            if not AREA_BOUNDS[0] <= area_fraction <= AREA_BOUNDS[1]:
                continue
            if forbidden is not None and (mask & forbidden).any():
                continue
            return mask, {"shape": shape, "center": [ci, cj], "size": size,
                          "area_fraction": float(area_fraction)}
    raise RuntimeError(f"no room to place a {shape} on the {h}x{w} canvas")


def generate_scene(
    seed: int,
    class_ids: Sequence[int] | None = None,
    image_size: int = 64,
    noise_level: float = 0.3,
    n_objects: int = 1,
) -> SceneSample:
    """One deterministic scene: shape(s) on a noisy background, exact mask.

    Two-object scenes place a second, class-distinct shape disjoint from
    the first; the sample keeps the first shape's label and mask, with the
    union mask alongside.
    """
    if image_size < 16:
        raise ValueError("image_size must be at least 16")
    if not 0.0 <= noise_level < 1.0:
        raise ValueError("noise_level must lie in [0, 1)")
    if n_objects not in (1, 2):
        raise ValueError("scenes hold one or two objects")
    ids = tuple(range(len(CLASS_SPECS))) if class_ids is None else tuple(class_ids)
    if not ids or any(not 0 <= c < len(CLASS_SPECS) for c in ids):
        raise ValueError("class_ids must be valid class indices")

    h = w = image_size
    stream = CounterStream(seed, "scene")
    noise = CounterStream(seed, "scene/noise").next_units(h * w).reshape(h, w)
    image = _BG_BASE + noise_level * 0.5 * noise

    # two shapes must fit disjointly, so each stays small
    fraction_range = (0.08, 0.32) if n_objects == 1 else (0.06, 0.12)
    label = ids[stream.next_below(len(ids))]
    masks, descriptors, labels = [], [], [label]
    shape, texture = CLASS_SPECS[label]
    mask, desc = _place_shape(stream, shape, h, w, fraction_range, None)
    image = np.where(mask, _texture(texture, h, w), image)
    masks.append(mask)
    descriptors.append(desc | {"texture": texture, "class": label,
                               "pixels": int(mask.sum())})

    if n_objects == 2:
        if len(ids) < 2:
            raise ValueError("two-object scenes need at least two classes")
        others = [c for c in ids if c != label]
        second = others[stream.next_below(len(others))]
        shape2, texture2 = CLASS_SPECS[second]
        mask2, desc2 = _place_shape(stream, shape2, h, w, fraction_range, masks[0])
        image = np.where(mask2, _texture(texture2, h, w), image)
        masks.append(mask2)
        descriptors.append(desc2 | {"texture": texture2, "class": second,
                                    "pixels": int(mask2.sum())})
        labels.append(second)

    union = BinaryMask(masks[0] | masks[1]) if n_objects == 2 else None
    return SceneSample(
        image=image[None],
        label=label,
        gt_mask=BinaryMask(masks[0]),
        union_mask=union,
        meta={"seed": seed, "noise_level": noise_level, "objects": descriptors,
              "classes": labels},
    )


# --- file I/O ---


def _quantize(values: np.ndarray) -> np.ndarray:
    # round half-up so golden files are stable across platforms
    return np.floor(255.0 * values + 0.5).astype(np.uint8)


def save_saliency_png(path: Union[str, PathLike], s: SaliencyMap) -> None:
    Image.fromarray(_quantize(s.values), mode="L").save(path)


def save_image_png(path: Union[str, PathLike], image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        Image.fromarray(_quantize(arr[0]), mode="L").save(path)
    elif arr.ndim == 3 and arr.shape[0] == 3:
        Image.fromarray(_quantize(arr).transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"expected a (1|3, H, W) image, got shape {arr.shape}")


def save_mask_png(path: Union[str, PathLike], mask: BinaryMask) -> None:
    Image.fromarray(mask.values.astype(np.uint8) * 255, mode="L").save(path)


def load_image(path: Union[str, PathLike]) -> np.ndarray:
    """8-bit grayscale or RGB image scaled to [0, 1], shape (C, H, W)."""
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float64)[None]
        elif img.mode == "RGB":
            arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
        else:
            raise ValueError(f"unsupported image mode {img.mode!r} in {path}")
    return arr / 255.0


def load_mask(path: Union[str, PathLike]) -> BinaryMask:
    """Ground-truth mask from an 8-bit grayscale PNG (nonzero -> 1) or a
    tensor file."""
    p = Path(path)
    if p.suffix == ".npy":
        tensor = read_tensor(p)
        if not isinstance(tensor, RawGrid):
            raise ValueError("mask tensor files must hold a 2-d grid")
        return BinaryMask(tensor.values != 0.0)
    with Image.open(p) as img:
        if img.mode != "L":
            raise ValueError(f"masks must be 8-bit grayscale, got mode {img.mode!r}")
        arr = np.asarray(img)
    return BinaryMask(arr != 0)


# --- dataset emission (manifest is JSON lines, one record per sample) ---


def generate_dataset(
    seed: int,
    count: int,
    out_dir: Union[str, PathLike],
    split: str,
    image_size: int = 64,
    noise_level: float = 0.3,
    class_ids: Sequence[int] | None = None,
    two_object_fraction: float = 0.0,
) -> Path:
    """Write images, masks, and a manifest for one split; returns the
    manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    two_key = derive_key(seed, f"{split}/two-object")

    records = []
    for index in range(count):
        sample_seed = derive_key(seed, f"{split}/sample/{index}")
        n_objects = 2 if unit_value(two_key, index) < two_object_fraction else 1
        sample = generate_scene(
            sample_seed, class_ids, image_size, noise_level, n_objects=n_objects
        )
        sample_id = f"{split}-{index:05d}"
        image_rel = f"images/{sample_id}.png"
        mask_rel = f"masks/{sample_id}.png"
        save_image_png(out / image_rel, sample.image)
        save_mask_png(out / mask_rel, sample.gt_mask)
        if sample.union_mask is not None:
            save_mask_png(out / f"masks/{sample_id}.union.png", sample.union_mask)
        counts = {str(d["class"]): d["pixels"] for d in sample.meta["objects"]}
        records.append(
            {
                "id": sample_id,
                "image": image_rel,
                "mask": mask_rel,
                "label": sample.label,
                "seed": sample_seed,
                "classes": sample.meta["classes"],
                "pixel_counts": counts,
            }
        )

    manifest = out / f"{split}.jsonl"
    with open(manifest, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def read_manifest(path: Union[str, PathLike]) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def mask_records(manifest_path: Union[str, PathLike]) -> list[MaskRecord]:
    """MaskRecord view of a manifest, for single-class filtering."""
    base = Path(manifest_path).parent
    return [
        MaskRecord(
            path=str(base / rec["mask"]),
            classes=frozenset(rec["classes"]),
            pixel_counts=rec.get("pixel_counts", {}),
        )
        for rec in read_manifest(manifest_path)
    ]


def load_pairs(manifest_path: Union[str, PathLike]) -> list[tuple[np.ndarray, int]]:
    """(image, label) pairs for training, in manifest order."""
    base = Path(manifest_path).parent
    return [
        (load_image(base / rec["image"]), rec["label"])
        for rec in read_manifest(manifest_path)
    ]
