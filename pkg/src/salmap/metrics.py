"""Localization and complexity metrics for saliency maps.

Six per-sample scores, each in [0, 1], evaluated against a binary
ground-truth mask at the same resolution (saliency is upsampled to mask
resolution before it gets here):

* pointing_game: does an argmax pixel land inside the mask
* top_k: fraction of the k highest-attribution pixels inside the mask
* relevance_mass: fraction of total attribution mass inside the mask
* relevance_rank: top-|mask| pixels inside the mask, over |mask|
* auc: rank statistic of saliency scores with mask membership as label
* sparseness: Gini index of the attribution distribution

Aggregates are plain pooled means, reported x100 with two decimals.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Sequence, Union

import numpy as np

from .attribution import AttributionResult
from .tensors import RawGrid, SaliencyMap

logger = logging.getLogger(__name__)

METRIC_NAMES = (
    "pointing_game",
    "sparseness",
    "relevance_mass",
    "relevance_rank",
    "top_k",
    "auc",
)

DISPLAY_NAMES = {
    "pointing_game": "Pointing-Game",
    "sparseness": "Sparseness",
    "relevance_mass": "Relevance Mass Accuracy",
    "relevance_rank": "Relevance Rank Accuracy",
    "top_k": "Top-K Intersection",
    "auc": "AUC",
}

DEFAULT_TOP_K = 1000  # clamped to H*W at evaluation time


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """An H x W per-pixel in/out-of-object mask."""

    values: np.ndarray  # bool

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError(f"BinaryMask expects a 2-d array, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("BinaryMask values must be 0 or 1")
            arr = arr.astype(bool)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def area(self) -> int:
        return int(self.values.sum())


def _saliency_array(s) -> np.ndarray:
    if isinstance(s, (SaliencyMap, RawGrid)):
        return s.values
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"saliency must be 2-d, got shape {arr.shape}")
    return arr


def _check_pair(s: np.ndarray, mask: BinaryMask, require_nonempty: bool = True):
    if s.shape != mask.values.shape:
        raise ValueError(f"saliency {s.shape} and mask {mask.values.shape} dims differ")
    if require_nonempty and mask.area == 0:
        raise ValueError("mask has no positive pixels")


def pointing_game(s, mask: BinaryMask) -> float:
    """1 if any global-argmax pixel lies inside the mask, else 0.

    Ties count: a hit needs only one argmax pixel inside the mask, which
    keeps the rule deterministic without random tie-breaking.
    """
    arr = _saliency_array(s)
    _check_pair(arr, mask)
    return float(bool((arr == arr.max())[mask.values].any()))


def _top_indices(arr: np.ndarray, k: int) -> np.ndarray:
    # value descending, row-major index ascending on ties: stable argsort of
    # the negated flat array gives exactly that ordering
    return np.argsort(-arr.reshape(-1), kind="stable")[:k]


def top_k_intersection(s, mask: BinaryMask, k: int) -> float:
    """|top-k pixels of s inside mask| / k."""
    arr = _saliency_array(s)
    _check_pair(arr, mask)
    if not 1 <= k <= arr.size:
        raise ValueError(f"k must lie in [1, {arr.size}], got {k}")
    hits = mask.values.reshape(-1)[_top_indices(arr, k)].sum()
    return float(hits) / k


def relevance_mass_accuracy(s, mask: BinaryMask) -> float:
    """Attribution mass inside the mask over total mass; 0 if total is 0."""
    arr = _saliency_array(s)
    _check_pair(arr, mask)
    total = arr.sum()
    if total == 0.0:
        return 0.0
    return float(arr[mask.values].sum() / total)


def relevance_rank_accuracy(s, mask: BinaryMask) -> float:
    """Fraction of the top-|mask| pixels that fall inside the mask."""
    arr = _saliency_array(s)
    _check_pair(arr, mask)
    g = mask.area
    hits = mask.values.reshape(-1)[_top_indices(arr, g)].sum()
    return float(hits) / g


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(s, mask: BinaryMask) -> float:
    """Rank-statistic AUC of saliency with mask membership as the label.

    Equals the probability that a uniformly drawn (in, out) pixel pair is
    ordered correctly, ties counting one half.
    """
    arr = _saliency_array(s)
    _check_pair(arr, mask)
    labels = mask.values.reshape(-1)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("auc needs both in-mask and out-of-mask pixels")
    ranks = _average_ranks(arr.reshape(-1))
    u = ranks[labels].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def sparseness(s) -> float:
    """Gini index of the (non-negative) attribution values.

    0 for a uniform map, (n-1)/n for a one-hot map. Computed on the
    normalized saliency values; the all-zero map is defined as 0. Accepts a
    map or a flat vector: the index only sees the sorted value multiset.
    """
    arr = s.values if isinstance(s, (SaliencyMap, RawGrid)) else np.asarray(s, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("sparseness of an empty vector is undefined")
    if arr.min() < 0.0:
        raise ValueError("sparseness expects non-negative values")
    v = np.sort(arr.reshape(-1))
    total = v.sum()
    if total == 0.0:
        logger.info("sparseness of an all-zero map is defined as 0")
        return 0.0
    if v[0] == v[-1]:
        return 0.0  # constant vector: exactly uniform
    n = v.size
    weights = 2.0 * np.arange(1, n + 1) - n - 1.0
    # summation noise can dip a hair below 0 for near-constant vectors
    return max(0.0, float((weights * v).sum() / (n * total)))


def evaluate_sample(
    result: Union[AttributionResult, SaliencyMap],
    mask: BinaryMask,
    k: int = DEFAULT_TOP_K,
) -> dict[str, float]:
    """All six metrics for one saliency/mask pair; k is clamped to H*W."""
    saliency = result.saliency if isinstance(result, AttributionResult) else result
    arr = _saliency_array(saliency)
    _check_pair(arr, mask)
    k = min(k, arr.size)
    return {
        "pointing_game": pointing_game(arr, mask),
        "sparseness": sparseness(arr),
        "relevance_mass": relevance_mass_accuracy(arr, mask),
        "relevance_rank": relevance_rank_accuracy(arr, mask),
        "top_k": top_k_intersection(arr, mask, k),
        "auc": auc(arr, mask),
    }


@dataclass(frozen=True)
class MetricReport:
    """Per-sample metric rows plus pooled means x100."""

    per_sample: tuple
    aggregates: dict[str, float]

    @property
    def count(self) -> int:
        return len(self.per_sample)

    def formatted(self) -> dict[str, str]:
        return {name: f"{self.aggregates[name]:.2f}" for name in METRIC_NAMES}


def aggregate(rows: Sequence[dict[str, float]]) -> MetricReport:
    """Pool per-sample rows into percentage means."""
    if not rows:
        raise ValueError("no rows to aggregate")
    aggregates = {
        name: 100.0 * float(np.mean([row[name] for row in rows])) for name in METRIC_NAMES
    }
    return MetricReport(per_sample=tuple(rows), aggregates=aggregates)


# --- report emission ---

CSV_HEADER = ("sample_id", "method") + METRIC_NAMES


def write_per_sample_csv(
    path: Union[str, PathLike], method: str, ids: Sequence[str], rows: Sequence[dict]
) -> None:
    """One CSV row per sample, fixed header, shortest-round-trip floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for sample_id, row in zip(ids, rows):
            writer.writerow([sample_id, method] + [repr(row[name]) for name in METRIC_NAMES])


def write_aggregate_json(path: Union[str, PathLike], method: str, report: MetricReport) -> None:
    doc = {
        "method": method,
        "samples": report.count,
        "metrics": {name: report.aggregates[name] for name in METRIC_NAMES},
        "formatted": report.formatted(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def render_report(aggregates: Iterable[dict]) -> tuple[str, str]:
    """Side-by-side method x metric table (CSV text, plain text).

    One column per method, six metric rows, values x100 at two decimals,
    higher is better.
    """
    docs = list(aggregates)
    if not docs:
        raise ValueError("no aggregate documents to report")
    methods = [doc["method"] for doc in docs]

    csv_lines = ["metric," + ",".join(methods)]
    for name in METRIC_NAMES:
        cells = [f"{doc['metrics'][name]:.2f}" for doc in docs]
        csv_lines.append(DISPLAY_NAMES[name] + "," + ",".join(cells))
    csv_text = "\n".join(csv_lines) + "\n"

    label_w = max(len(DISPLAY_NAMES[name]) for name in METRIC_NAMES)
    col_w = max(8, *(len(m) for m in methods))
    lines = [
        "Saliency map performance comparison (higher values are better)",
        "",
        " " * label_w + "  " + "  ".join(m.rjust(col_w) for m in methods),
    ]
    for name in METRIC_NAMES:
        cells = [f"{doc['metrics'][name]:.2f}".rjust(col_w) for doc in docs]
        lines.append(DISPLAY_NAMES[name].ljust(label_w) + "  " + "  ".join(cells))
    lines.append("")
    lines.append("values are per-sample means x100 over %s samples" %
                 "/".join(str(doc.get("samples", "?")) for doc in docs))
    return csv_text, "\n".join(lines) + "\n"
