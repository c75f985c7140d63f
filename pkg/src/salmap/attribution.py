"""Saliency attribution methods: lafam, gradcam, and relax.

lafam is the label-free one: min-max normalized channel mean of an
activation volume, upsampled to input size. gradcam weights each channel
by the spatial mean of a class-score gradient and applies ReLU before
normalizing. relax occludes the input with randomized masks and weights
each mask by the cosine similarity between the embeddings of the original
and occluded images.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .rng import derive_key, unit_values
from .tensors import (
    ActivationVolume,
    RawGrid,
    SaliencyMap,
    minmax_normalize,
    channel_mean,
    read_tensor,
    upsample_bilinear,
    upsample_nearest,
    write_tensor,
)

logger = logging.getLogger(__name__)

# mask-count and grid parity with a 2048-channel, 7x7 final conv layer
DEFAULT_MASK_COUNT = 2048
DEFAULT_MASK_CELLS = 7
DEFAULT_MASK_P = 0.5


@dataclass(frozen=True, eq=False)
class OcclusionMaskBatch:
    """N Bernoulli cell grids plus their full-resolution occlusion masks.

    Regenerating with the same (seed, n, cells, p) parameters is
    bit-identical; ``low_res`` holds {0,1} cells, ``full_res`` continuous
    masks in [0,1] at input resolution.
    """

    seed: int
    bernoulli_p: float
    low_res: np.ndarray  # (N, cells_h, cells_w) uint8
    full_res: np.ndarray  # (N, out_h, out_w) float64
    smoothing: str = "bilinear"

    def __post_init__(self):
        if self.low_res.ndim != 3 or self.full_res.ndim != 3:
            raise ValueError("mask batches are (N, h, w) stacks")
        if self.low_res.shape[0] != self.full_res.shape[0] or self.low_res.shape[0] < 1:
            raise ValueError("low/full resolution mask counts disagree or N < 1")
        if not np.isin(self.low_res, (0, 1)).all():
            raise ValueError("low_res cells must be 0 or 1")
        if self.full_res.min() < 0.0 or self.full_res.max() > 1.0:
            raise ValueError("full_res masks must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.low_res.shape[0]

    @property
    def cells(self) -> tuple[int, int]:
        return self.low_res.shape[1], self.low_res.shape[2]


@dataclass(frozen=True, eq=False)
class AttributionResult:
    """A saliency map at input resolution plus how it was produced.

    ``raw`` is the pre-normalization grid (None when loaded from disk,
    since only the saliency tensor and provenance are serialized).
    """

    method: str
    saliency: SaliencyMap
    raw: Union[RawGrid, None]
    provenance: dict

    def __post_init__(self):
        expected = {
            "lafam": {"layer_index"},
            "gradcam": {"layer_index", "class_index"},
            "relax": {"mask_seed", "masks_n", "masks_p", "cells", "fill_value",
                      "smoothing", "clamp_negative"},
        }.get(self.method)
        if expected is None:
            raise ValueError(f"unknown attribution method {self.method!r}")
        if set(self.provenance) != expected:
            raise ValueError(
                f"{self.method} provenance must have exactly {sorted(expected)}, "
                f"got {sorted(self.provenance)}"
            )


def lafam(
    volume: ActivationVolume, out_h: int, out_w: int, layer_index: int | None = None
) -> AttributionResult:
    """Label-free saliency: normalize(channel_mean(A)) upsampled.

    Consumes only the activation volume; no labels, no gradients.
    """
    raw = channel_mean(volume)
    saliency = upsample_nearest(minmax_normalize(raw), out_h, out_w)
    return AttributionResult(
        method="lafam",
        saliency=saliency,
        raw=raw,
        provenance={"layer_index": layer_index},
    )


def gradcam(
    volume: ActivationVolume,
    grads: np.ndarray,
    out_h: int,
    out_w: int,
    layer_index: int | None = None,
    class_index: int | None = None,
) -> AttributionResult:
    """Class-specific saliency: ReLU of the gradient-weighted channel sum.

    Channel weights are the spatial means of the class-score gradient;
    ReLU precedes min-max normalization, normalization precedes upsampling.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != volume.values.shape:
        raise ValueError(
            f"gradient shape {grads.shape} does not match volume {volume.values.shape}"
        )
    alphas = grads.mean(axis=(1, 2))
    pre = np.maximum(np.tensordot(alphas, volume.values, axes=1), 0.0)
    raw = RawGrid(pre)
    saliency = upsample_nearest(minmax_normalize(raw), out_h, out_w)
    return AttributionResult(
        method="gradcam",
        saliency=saliency,
        raw=raw,
        provenance={"layer_index": layer_index, "class_index": class_index},
    )


def sample_masks(
    seed: int,
    n: int,
    cells_h: int,
    cells_w: int,
    p: float,
    out_h: int,
    out_w: int,
    smoothing: str = "bilinear",
) -> OcclusionMaskBatch:
    """Draw N occlusion masks: Bernoulli(p) cells, upsampled to input size.

    Cell c of mask m comes from the counter stream at (seed, m, c), so the
    batch is reproducible and order-insensitive. Bilinear smoothing adds a
    per-mask uniform sub-cell shift from the same stream; "nearest" keeps
    hard cell edges instead.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    if n < 1:
        raise ValueError("need at least one mask")
    if smoothing not in ("bilinear", "nearest"):
        raise ValueError(f"unknown smoothing {smoothing!r}")

    cells = cells_h * cells_w
    cell_key = derive_key(seed, "masks/cells")
    low = (unit_values(cell_key, 0, n * cells) < p).reshape(n, cells_h, cells_w)
    shifts = unit_values(derive_key(seed, "masks/shift"), 0, 2 * n).reshape(n, 2)

    full = np.empty((n, out_h, out_w))
    for m in range(n):
        if smoothing == "bilinear":
            grid = RawGrid(low[m].astype(np.float64))
            up = upsample_bilinear(grid, out_h, out_w, shifts[m, 0], shifts[m, 1])
            full[m] = up.values
        else:
            full[m] = _nearest_raw(low[m].astype(np.float64), out_h, out_w)
    return OcclusionMaskBatch(
        seed=seed,
        bernoulli_p=p,
        low_res=low.astype(np.uint8),
        full_res=full,
        smoothing=smoothing,
    )


def _nearest_raw(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = (np.arange(out_h) * grid.shape[0]) // out_h
    cols = (np.arange(out_w) * grid.shape[1]) // out_w
    return grid[np.ix_(rows, cols)]


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|), clipped to [-1, 1]; 0 if either norm is below 1e-12."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"embedding lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _embedder(encoder) -> tuple[Callable, Callable | None]:
    if callable(encoder) and not hasattr(encoder, "embed"):
        return encoder, None
    embed = getattr(encoder, "embed", None)
    if embed is None:
        raise TypeError("encoder must be callable or expose .embed(image)")
    return embed, getattr(encoder, "embed_batch", None)


def relax(
    image,
    encoder,
    masks: OcclusionMaskBatch,
    fill_value: float = 0.0,
    clamp_negative: bool = True,
    batch_size: int = 256,
) -> AttributionResult:
    """Similarity-weighted occlusion saliency.

    Each mask keeps a random subset of the image; its weight is the cosine
    similarity between the embeddings of the original and occluded images
    (clamped below at 0 by default so the raw map stays non-negative).
    raw[i,j] = (1 / (N p)) * sum_m s_m * mask_m[i,j], then min-max
    normalized. Already at input resolution, so no upsampling happens here.
    """
    img = image.values[None] if isinstance(image, RawGrid) else np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[1:] != masks.full_res.shape[1:]:
        raise ValueError(
            f"masks are {masks.full_res.shape[1:]}, image is {img.shape[1:]}"
        )

    embed, embed_batch = _embedder(encoder)
    h0 = np.asarray(embed(img), dtype=np.float64).reshape(-1)

    n = masks.count
    embs = np.empty((n, h0.size))
    if embed_batch is not None:
        for start in range(0, n, batch_size):
            chunk = masks.full_res[start : start + batch_size]
            occluded = img[None] * chunk[:, None] + fill_value * (1.0 - chunk[:, None])
            embs[start : start + len(chunk)] = np.asarray(embed_batch(occluded), dtype=np.float64)
    else:
        for m in range(n):
            occluded = img * masks.full_res[m][None] + fill_value * (1.0 - masks.full_res[m][None])
            embs[m] = np.asarray(embed(occluded), dtype=np.float64).reshape(-1)

    norms = np.linalg.norm(embs, axis=1)
    degenerate = (norms < 1e-12) | (np.linalg.norm(h0) < 1e-12)
    if degenerate.any():
        logger.warning(
            "relax: %d of %d embeddings had zero norm; their similarity is 0",
            int(degenerate.sum()), n,
        )
    safe = np.where(degenerate, 1.0, norms * max(np.linalg.norm(h0), 1e-300))
    sims = np.where(degenerate, 0.0, np.clip(embs @ h0 / safe, -1.0, 1.0))
    if clamp_negative:
        sims = np.maximum(sims, 0.0)

    raw = RawGrid(np.tensordot(sims, masks.full_res, axes=1) / (n * masks.bernoulli_p))
    return AttributionResult(
        method="relax",
        saliency=minmax_normalize(raw),
        raw=raw,
        provenance={
            "mask_seed": masks.seed,
            "masks_n": n,
            "masks_p": masks.bernoulli_p,
            "cells": list(masks.cells),
            "fill_value": fill_value,
            "smoothing": masks.smoothing,
            "clamp_negative": clamp_negative,
        },
    )


# --- serialization: saliency tensor + JSON provenance sidecar ---


def sidecar_path(saliency_path: Union[str, PathLike]) -> Path:
    return Path(saliency_path).with_suffix(".provenance.json")


def write_result(saliency_path: Union[str, PathLike], result: AttributionResult) -> None:
    write_tensor(saliency_path, result.saliency)
    doc = {"method": result.method, "provenance": result.provenance}
    sidecar_path(saliency_path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_result(saliency_path: Union[str, PathLike]) -> AttributionResult:
    tensor = read_tensor(saliency_path)
    if not isinstance(tensor, RawGrid):
        raise ValueError("saliency files hold a single 2-d map")
    doc = json.loads(sidecar_path(saliency_path).read_text())
    return AttributionResult(
        method=doc["method"],
        saliency=SaliencyMap(tensor.values),
        raw=None,
        provenance=doc["provenance"],
    )
