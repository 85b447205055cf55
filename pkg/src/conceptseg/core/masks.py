"""Binary pixel masks and their run-length persistence form.

Masks are row-major boolean grids. The RLE form stores alternating run
lengths starting with background, with a leading zero run when the first
pixel is foreground; this is the on-disk representation used by dataset
and prediction files.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Mask dimensions are inconsistent with the operation."""


class MalformedRleError(ValueError):
    """RLE counts violate the codec invariants."""


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A height x width boolean grid; True marks foreground pixels."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ShapeError(f"mask grid must be 2-D and non-empty, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_pixels(cls, height: int, width: int, pixels: Iterable[tuple[int, int]]) -> "BinaryMask":
        bits = np.zeros((height, width), dtype=bool)
        for r, c in pixels:
            bits[r, c] = True
        return cls(bits)


@dataclass(frozen=True)
class RleMask:
    """Run-length coded mask: alternating runs, background first.

    A zero-length run is only legal at index 0 (mask starting with
    foreground); counts must sum to height*width.
    """

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise MalformedRleError(f"dimensions must be positive, got {self.height}x{self.width}")
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise MalformedRleError("counts must be non-empty")
        if counts[0] < 0 or any(c < 1 for c in counts[1:]):
            raise MalformedRleError(f"runs after the first must be positive, got {counts}")
        total = sum(counts)
        if total != self.height * self.width:
            raise MalformedRleError(
                f"counts sum to {total}, expected {self.height * self.width} for {self.height}x{self.width}"
            )

    def to_json(self) -> dict:
        return {"height": self.height, "width": self.width, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(height=obj["height"], width=obj["width"], counts=tuple(obj["counts"]))


def rle_encode(mask: BinaryMask) -> RleMask:
    """Encode a mask as alternating run lengths, background run first."""
    flat = mask.bits.reshape(-1)
    # boundaries where the pixel value changes, in flat row-major order
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(height=mask.height, width=mask.width, counts=tuple(runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    """Inverse of :func:`rle_encode`."""
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, np.asarray(rle.counts, dtype=np.int64))
    return BinaryMask(flat.reshape(rle.height, rle.width))


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; two empty masks count as a perfect match (1.0)."""
    _check_same_shape(a, b)
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    return inter / union


def mask_union(masks: Sequence[BinaryMask], *, height: int | None = None, width: int | None = None) -> BinaryMask:
    """Pixelwise OR of masks; an empty list needs explicit dimensions."""
    if not masks:
        if height is None or width is None:
            raise ShapeError("union of an empty mask list requires explicit height and width")
        return BinaryMask.empty(height, width)
    first = masks[0]
    if height is not None and (height, width) != (first.height, first.width):
        raise ShapeError(
            f"explicit dimensions {height}x{width} disagree with masks {first.height}x{first.width}"
        )
    out = np.zeros_like(first.bits)
    for m in masks:
        _check_same_shape(first, m)
        np.logical_or(out, m.bits, out=out)
    return BinaryMask(out)
