"""Mapping from key columns of an attention map to frame regions.

A layout describes, for one attention call, which contiguous column spans
belong to the sink frame, the neighboring window, and the current frame.
Spans are expressed in tokens; each frame contributes ``HW`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

REGION_KINDS = ("sink", "neighbor", "current")


@dataclass(frozen=True)
class Region:
    kind: str
    start: int
    stop: int  # exclusive

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise ValueError(f"unknown region kind {self.kind!r}")
        if not 0 <= self.start < self.stop:
            raise ValueError(f"bad span [{self.start}, {self.stop})")


@dataclass(frozen=True)
class FrameLayout:
    """Ordered, contiguous, non-overlapping regions covering all key columns."""

    HW: int
    regions: tuple[Region, ...]

    def __post_init__(self):
        if not self.regions:
            raise ValueError("layout needs at least one region")
        pos = 0
        for r in self.regions:
            if r.start != pos:
                raise ValueError("regions must be contiguous from column 0")
            pos = r.stop
        kinds = [r.kind for r in self.regions]
        if kinds.count("current") != 1:
            raise ValueError("layout must contain exactly one current region")
        if kinds.count("sink") > 1:
            raise ValueError("layout may contain at most one sink region")

    @property
    def total_columns(self) -> int:
        return self.regions[-1].stop

    @classmethod
    def from_frame_kinds(cls, HW: int, kinds: list[str]) -> "FrameLayout":
        """Build a layout from one region kind per frame, coalescing runs."""
        if not kinds:
            raise ValueError("at least one frame required")
        regions: list[Region] = []
        start = 0
        for i, kind in enumerate(kinds):
            stop = (i + 1) * HW
            if regions and regions[-1].kind == kind:
                regions[-1] = Region(kind, regions[-1].start, stop)
            else:
                regions.append(Region(kind, start, stop))
            start = stop
        return cls(HW=HW, regions=tuple(regions))

    def columns(self, kind: str) -> np.ndarray:
        """Sorted key-column indices belonging to regions of ``kind``."""
        spans = [np.arange(r.start, r.stop) for r in self.regions if r.kind == kind]
        if not spans:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(spans)

    def mask_for(self, kinds: set[str] | frozenset[str]) -> np.ndarray:
        """Boolean key mask selecting all columns whose region kind is in ``kinds``."""
        m = np.zeros(self.total_columns, dtype=bool)
        for r in self.regions:
            if r.kind in kinds:
                m[r.start : r.stop] = True
        return m

    def check_columns(self, num_columns: int) -> None:
        if self.total_columns != num_columns:
            raise ShapeError(
                f"layout covers {self.total_columns} columns, map has {num_columns}"
            )
