"""Geometry between bounding boxes and the vision transformer's patch grid.

A PatchMask selects which patch tokens may participate in attention. Slot 0 is
the vision [CLS] token and is always allowed, so a pooled representation exists
under any mask. A patch is allowed iff its pixel rectangle intersects the box
with positive area (containment would drop entities smaller than one patch).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EntityBox


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise PatchError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def rows(self) -> int:
        return self.image_size // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


@dataclass
class PatchMask:
    """allowed[0] is the vision [CLS] slot; allowed[1 + i*cols + j] is patch (i, j)."""

    grid: PatchGrid
    allowed: np.ndarray

    def __post_init__(self) -> None:
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.shape != (1 + self.grid.n_patches,):
            raise PatchError(
                f"mask length {self.allowed.shape} does not match grid "
                f"(expected {1 + self.grid.n_patches})"
            )
        if not self.allowed[0]:
            raise PatchError("vision [CLS] slot must always be allowed")
        if not self.allowed[1:].any():
            raise PatchError("mask must allow at least one patch")

    @property
    def patch_flags(self) -> np.ndarray:
        return self.allowed[1:].reshape(self.grid.rows, self.grid.cols)

    def ascii_grid(self) -> str:
        return "\n".join(
            "".join("#" if flag else "." for flag in row) for row in self.patch_flags
        )


def full_mask(grid: PatchGrid) -> PatchMask:
    return PatchMask(grid, np.ones(1 + grid.n_patches, dtype=bool))


def patches_for_bbox(grid: PatchGrid, box: EntityBox) -> PatchMask:
    """Patches whose pixel rectangle intersects the box with positive area."""
    size = grid.image_size
    if not (0 <= box.xmin < box.xmax <= size and 0 <= box.ymin < box.ymax <= size):
        raise PatchError(
            f"box ({box.xmin}, {box.ymin}, {box.xmax}, {box.ymax}) outside "
            f"{size}x{size} image"
        )
    p = grid.patch_size
    allowed = np.zeros(1 + grid.n_patches, dtype=bool)
    allowed[0] = True
    for i in range(grid.rows):
        if not (i * p < box.ymax and (i + 1) * p > box.ymin):
            continue
        for j in range(grid.cols):
            if j * p < box.xmax and (j + 1) * p > box.xmin:
                allowed[1 + i * grid.cols + j] = True
    return PatchMask(grid, allowed)


def union_mask(masks: Sequence[PatchMask]) -> PatchMask:
    """Element-wise OR; masks must share grid dimensions."""
    if not masks:
        raise PatchError("union of zero masks is undefined")
    grid = masks[0].grid
    combined = masks[0].allowed.copy()
    for mask in masks[1:]:
        if mask.grid != grid:
            raise PatchError(f"grid mismatch: {mask.grid} vs {grid}")
        combined |= mask.allowed
    return PatchMask(grid, combined)
