"""Binary masks, the COCO uncompressed RLE codec and pixel-set algebra.

RLE dialect: ``counts`` are run lengths over the column-major (Fortran order)
flattening of an ``[height, width]`` grid. The first run counts zeros, so a
mask whose first pixel is set starts with a ``0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, EmptyRegionError, MalformedInputError, UnsupportedRleError


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Immutable 2-D bit grid. ``bits`` has shape ``(height, width)``."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise MalformedInputError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise MalformedInputError(f"mask must be at least 1x1, got {arr.shape[1]}x{arr.shape[0]}")
        arr = np.array(arr, dtype=bool, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_box(cls, width: int, height: int, x0: int, y0: int, x1: int, y1: int) -> "BinaryMask":
        arr = np.zeros((height, width), dtype=bool)
        arr[y0:y1, x0:x1] = True
        return cls(arr)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        _check_same(self, other)
        return BinaryMask(self.bits | other.bits)

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        _check_same(self, other)
        return BinaryMask(self.bits & other.bits)

    def __invert__(self) -> "BinaryMask":
        return BinaryMask(~self.bits)

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={area(self)})"


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        if isinstance(self.counts, (str, bytes)):
            raise UnsupportedRleError("compressed (string) RLE counts are not supported; use uncompressed counts")
        size = tuple(int(v) for v in self.size)
        if len(size) != 2 or size[0] < 1 or size[1] < 1:
            raise MalformedInputError(f"RLE size must be [height, width] with both >= 1, got {list(self.size)}")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise MalformedInputError("RLE counts must be non-negative")
        if any(c == 0 for c in counts[1:]):
            raise MalformedInputError("RLE counts contain an interior zero-length run")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            size, counts = obj["size"], obj["counts"]
        except (KeyError, TypeError) as exc:
            raise MalformedInputError(f"RLE object needs 'size' and 'counts': {exc}") from None
        if isinstance(counts, (str, bytes)):
            raise UnsupportedRleError("compressed (string) RLE counts are not supported; use uncompressed counts")
        return cls(tuple(size), tuple(counts))

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}


@dataclass(frozen=True)
class PixelBox:
    """Inclusive x0/y0, exclusive x1/y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def _check_same(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def rle_decode(rle: RleMask) -> BinaryMask:
    h, w = rle.size
    total = sum(rle.counts)
    if total != h * w:
        raise MalformedInputError(f"RLE run lengths sum to {total}, expected {h * w} for size [{h}, {w}]")
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return BinaryMask(flat.reshape((h, w), order="F"))


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = mask.bits.ravel(order="F")
    # positions where the value changes, plus both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask((mask.height, mask.width), tuple(runs))


def area(mask: BinaryMask) -> int:
    return int(np.count_nonzero(mask.bits))


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    _check_same(a, b)
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 0.0
    return np.count_nonzero(a.bits & b.bits) / union


def containment(a: BinaryMask, b: BinaryMask) -> float:
    """Fraction of ``a``'s pixels that are also set in ``b``."""
    _check_same(a, b)
    na = np.count_nonzero(a.bits)
    if na == 0:
        return 0.0
    return np.count_nonzero(a.bits & b.bits) / na


def bounding_box(mask: BinaryMask) -> PixelBox:
    rows = np.flatnonzero(mask.bits.any(axis=1))
    if rows.size == 0:
        raise EmptyRegionError("bounding box of an empty mask is undefined")
    cols = np.flatnonzero(mask.bits.any(axis=0))
    return PixelBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index sampled by each destination pixel center."""
    i = np.arange(dst, dtype=np.int64)
    return ((2 * i + 1) * src) // (2 * dst)


def resize_nearest(mask: BinaryMask, w: int, h: int) -> BinaryMask:
    if w < 1 or h < 1:
        raise MalformedInputError(f"resize target must be at least 1x1, got {w}x{h}")
    if (w, h) == (mask.width, mask.height):
        return mask
    rows = nearest_indices(mask.height, h)
    cols = nearest_indices(mask.width, w)
    return BinaryMask(mask.bits[np.ix_(rows, cols)])


def check_same_dims(masks: Sequence[BinaryMask]) -> None:
    """Raise if any mask differs in size from the first, naming its index."""
    if not masks:
        return
    ref = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != ref:
            raise DimensionMismatchError(
                f"mask {i} is {m.width}x{m.height}, expected {ref[1]}x{ref[0]}"
            )
