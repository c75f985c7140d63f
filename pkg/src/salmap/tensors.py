"""Dense tensor containers, normalization, upsampling, and tensor-file I/O.

Containers are immutable: construction validates shape and finiteness and
the stored array is a read-only copy, so values can be shared freely across
threads. All operations here are pure functions.

The on-disk tensor format is the standard NPY v1 layout (magic
``\\x93NUMPY``), restricted to little-endian float32/float64 C-contiguous
payloads, so arrays exported by external tools load directly and
round-trips are bit-exact.
"""
from __future__ import annotations

import ast
import struct
from dataclasses import dataclass
from os import PathLike
from typing import BinaryIO, Union

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class TensorFileError(ValueError):
    """Base class for tensor interchange file problems."""


class MalformedHeaderError(TensorFileError):
    """Magic bytes, version, or header dictionary are not parseable."""


class UnsupportedElementTypeError(TensorFileError):
    """The file is well-formed but uses an element type or layout we reject."""


class PayloadMismatchError(TensorFileError):
    """Declared shape disagrees with the number of payload bytes."""


def _freeze(values, *, ndim: int, what: str) -> np.ndarray:
    """Validated, read-only, C-contiguous float copy of ``values``."""
    arr = np.asarray(values)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    arr = np.array(arr, order="C", copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{what} expects a {ndim}-d array, got shape {arr.shape}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ValueError(f"{what} dimensions must all be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ActivationVolume:
    """A K x H x W activation tensor captured at a convolutional layer.

    Channel-major, row-major layout; flat index = k*H*W + i*W + j.
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, ndim=3, what="ActivationVolume"))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class RawGrid:
    """An H x W grid of finite reals with unbounded range."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, ndim=2, what="RawGrid"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """An H x W attribution grid with values in [0, 1].

    Unless the map is identically zero, both 0 and 1 are attained exactly,
    which is what min-max normalization guarantees.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.values, ndim=2, what="SaliencyMap")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"SaliencyMap values outside [0, 1]: min={lo}, max={hi}")
        if hi != 0.0 and (lo != 0.0 or hi != 1.0):
            raise ValueError(
                f"non-zero SaliencyMap must attain 0 and 1, got min={lo}, max={hi}"
            )
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CaptureConfig:
    """Selects which convolutional layer to read activations from.

    ``post_activation`` captures the layer output after its nonlinearity
    (and pooling); otherwise the raw convolution output is used.
    """

    layer_index: int
    post_activation: bool = True


def channel_mean(volume: ActivationVolume) -> RawGrid:
    """Average the activation volume over channels: G[i,j] = mean_k A[k,i,j]."""
    return RawGrid(volume.values.mean(axis=0, dtype=np.float64))


def minmax_normalize(grid: RawGrid) -> SaliencyMap:
    """Rescale a grid to [0, 1] via (g - min) / (max - min).

    A constant grid has no range to stretch; it maps to the all-zero map,
    signalling "no localized evidence" while keeping downstream metrics
    well-defined.
    """
    g = grid.values.astype(np.float64)
    lo = g.min()
    hi = g.max()
    if hi == lo:
        return SaliencyMap(np.zeros_like(g))
    return SaliencyMap((g - lo) / (hi - lo))


def _nearest_index_map(n_out: int, n_in: int) -> np.ndarray:
    # floor(i * n_in / n_out), exact in integer arithmetic
    return (np.arange(n_out) * n_in) // n_out


def upsample_nearest(saliency: SaliencyMap, out_h: int, out_w: int) -> SaliencyMap:
    """Nearest-neighbor upsampling; source-grid-aligned index mapping.

    out[i,j] = in[floor(i*h/out_h), floor(j*w/out_w)], which replicates each
    cell as a block at integer scale factors. Downscaling is rejected.
    """
    h, w = saliency.height, saliency.width
    if out_h < h or out_w < w:
        raise ValueError(f"refusing to downscale {h}x{w} -> {out_h}x{out_w}")
    rows = _nearest_index_map(out_h, h)
    cols = _nearest_index_map(out_w, w)
    return SaliencyMap(saliency.values[np.ix_(rows, cols)])


def upsample_bilinear(
    grid: RawGrid, out_h: int, out_w: int, shift_i: float = 0.0, shift_j: float = 0.0
) -> RawGrid:
    """Bilinear upsampling of a low-res grid treated as cell centers.

    (shift_i, shift_j) translate the sampling lattice by a fraction of a
    low-res cell, the construction used for smoothing randomized occlusion
    grids; borders clamp to the edge value, so output range never exceeds
    input range. Downscaling is rejected.
    """
    h, w = grid.height, grid.width
    if out_h < h or out_w < w:
        raise ValueError(f"refusing to downscale {h}x{w} -> {out_h}x{out_w}")
    if not (0.0 <= shift_i < 1.0 and 0.0 <= shift_j < 1.0):
        raise ValueError("shifts must lie in [0, 1)")

    u = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5 + shift_i
    v = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5 + shift_j

    i0 = np.clip(np.floor(u).astype(np.int64), 0, h - 1)
    j0 = np.clip(np.floor(v).astype(np.int64), 0, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    ti = np.clip(u - i0, 0.0, 1.0)[:, None]
    tj = np.clip(v - j0, 0.0, 1.0)[None, :]

    g = grid.values
    top = g[np.ix_(i0, j0)] * (1.0 - tj) + g[np.ix_(i0, j1)] * tj
    bottom = g[np.ix_(i1, j0)] * (1.0 - tj) + g[np.ix_(i1, j1)] * tj
    return RawGrid(top * (1.0 - ti) + bottom * ti)


# --- tensor interchange files (NPY v1, <f4 / <f8, C order) ---

_MAGIC = b"\x93NUMPY"
_DESCR_TO_DTYPE = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _header_bytes(dtype: np.dtype, shape: tuple[int, ...]) -> bytes:
    descr = "<f4" if dtype == np.float32 else "<f8"
    shape_repr = "(%s)" % (
        "%d," % shape[0] if len(shape) == 1 else ", ".join(str(d) for d in shape)
    )
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # pad with spaces so magic+version+len+header is a multiple of 64, newline-terminated
    unpadded = len(_MAGIC) + 2 + 2 + len(header) + 1
    header = header + " " * (-unpadded % 64) + "\n"
    return _MAGIC + bytes([1, 0]) + struct.pack("<H", len(header)) + header.encode("latin1")


def write_array(stream: BinaryIO, arr: np.ndarray) -> None:
    """Write one array to a binary stream in the interchange format."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _FLOAT_DTYPES:
        raise UnsupportedElementTypeError(f"only float32/float64 payloads, got {arr.dtype}")
    stream.write(_header_bytes(arr.dtype, arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_array(stream: BinaryIO) -> np.ndarray:
    """Read one array from a binary stream, validating the header strictly."""
    magic = stream.read(6)
    if magic != _MAGIC:
        raise MalformedHeaderError(f"bad magic bytes: {magic!r}")
    version = stream.read(2)
    if len(version) != 2 or version[0] not in (1, 2):
        raise MalformedHeaderError(f"unsupported format version: {version!r}")
    if version[0] == 1:
        raw_len = stream.read(2)
        if len(raw_len) != 2:
            raise MalformedHeaderError("truncated header length")
        (header_len,) = struct.unpack("<H", raw_len)
    else:
        raw_len = stream.read(4)
        if len(raw_len) != 4:
            raise MalformedHeaderError("truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
    header = stream.read(header_len)
    if len(header) != header_len:
        raise MalformedHeaderError("truncated header")
    try:
        meta = ast.literal_eval(header.decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeaderError(f"unparseable header dictionary: {exc}") from exc
    if not isinstance(meta, dict) or not {"descr", "fortran_order", "shape"} <= set(meta):
        raise MalformedHeaderError(f"header missing required keys: {meta!r}")

    descr = meta["descr"]
    if descr not in _DESCR_TO_DTYPE:
        raise UnsupportedElementTypeError(f"unsupported element type {descr!r}")
    if meta["fortran_order"]:
        raise UnsupportedElementTypeError("fortran-order payloads are not supported")
    shape = meta["shape"]
    if not isinstance(shape, tuple) or not all(
        isinstance(d, int) and d >= 0 for d in shape
    ):
        raise MalformedHeaderError(f"invalid shape entry {shape!r}")

    dtype = _DESCR_TO_DTYPE[descr]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(expected)
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"shape {shape} needs {expected} payload bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path: Union[str, PathLike], tensor) -> None:
    """Write an ActivationVolume, RawGrid, SaliencyMap, or ndarray to ``path``."""
    arr = tensor.values if hasattr(tensor, "values") else np.asarray(tensor)
    with open(path, "wb") as fh:
        write_array(fh, arr)


def read_tensor(path: Union[str, PathLike]) -> Union[ActivationVolume, RawGrid]:
    """Read a tensor file: 3-d payloads become ActivationVolume, 2-d RawGrid."""
    with open(path, "rb") as fh:
        arr = read_array(fh)
        trailing = fh.read(1)
    if trailing:
        raise PayloadMismatchError("trailing bytes after declared payload")
    if arr.ndim == 3:
        return ActivationVolume(arr)
    if arr.ndim == 2:
        return RawGrid(arr)
    raise UnsupportedElementTypeError(
        f"expected a 2-d or 3-d tensor, file holds rank {arr.ndim}"
    )
