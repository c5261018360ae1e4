"""Patch texture diversity and Smash&Reconstruction.

A patch's diversity is the sum of absolute neighbour differences along the
horizontal, vertical, diagonal and anti-diagonal directions, summed over
channels. Smash&Reconstruction crops many random patches, ranks them by
diversity and tiles the extremes into a rich and a poor mosaic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall, PatchTooSmall
from .imaging import ImageBuffer

SELECTION_MODES = ("texture_sorted", "random")


def texture_diversity(patch) -> int:
    """Diversity score of an ``M x M`` (or ``M x M x C``) block of 8-bit samples."""
    x = np.asarray(patch)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square patch, got shape {x.shape}")
    if x.shape[0] < 2:
        raise PatchTooSmall(f"patch side must be >= 2, got {x.shape[0]}")
    return int(diversity_batch(x[None])[0])


def diversity_batch(patches: np.ndarray) -> np.ndarray:
    """Vectorized diversity for a stack of ``(N, M, M, C)`` patches."""
    x = patches.astype(np.int64)
    horiz = np.abs(x[:, :, :-1] - x[:, :, 1:]).sum(axis=(1, 2, 3))
    vert = np.abs(x[:, :-1, :] - x[:, 1:, :]).sum(axis=(1, 2, 3))
    diag = np.abs(x[:, :-1, :-1] - x[:, 1:, 1:]).sum(axis=(1, 2, 3))
    anti = np.abs(x[:, 1:, :-1] - x[:, :-1, 1:]).sum(axis=(1, 2, 3))
    return horiz + vert + diag + anti


@dataclass(frozen=True)
class SmashConfig:
    patch_side: int = 32
    num_patches: int = 192
    patches_per_mosaic: int = 64
    seed: int = 0
    selection_mode: str = "texture_sorted"

    def __post_init__(self):
        if self.patch_side < 2:
            raise PatchTooSmall(f"patch_side must be >= 2, got {self.patch_side}")
        g = math.isqrt(self.patches_per_mosaic)
        if self.patches_per_mosaic < 1 or g * g != self.patches_per_mosaic:
            raise ValueError(f"patches_per_mosaic must be a perfect square, got {self.patches_per_mosaic}")
        if 2 * self.patches_per_mosaic > self.num_patches:
            raise ValueError("need at least 2 * patches_per_mosaic sampled patches")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.patches_per_mosaic)

    @property
    def mosaic_side(self) -> int:
        return self.grid_side * self.patch_side

    @classmethod
    def for_patch_side(cls, patch_side: int, mosaic_side: int = 256, **kw) -> "SmashConfig":
        """Keep the mosaic size fixed and scale the patch count with the patch side."""
        if mosaic_side % patch_side:
            raise ValueError(f"mosaic side {mosaic_side} is not a multiple of {patch_side}")
        per = (mosaic_side // patch_side) ** 2
        return cls(patch_side=patch_side, num_patches=3 * per, patches_per_mosaic=per, **kw)


@dataclass(frozen=True, eq=False)
class PatchRecord:
    pixels: np.ndarray
    origin: tuple[int, int]
    l_div: int
    index: int = 0


@dataclass(frozen=True, eq=False)
class TexturePair:
    rich: ImageBuffer
    poor: ImageBuffer
    grid_side: int
    rich_patches: tuple[PatchRecord, ...] = ()
    poor_patches: tuple[PatchRecord, ...] = ()


def _check_size(img: ImageBuffer, m: int):
    if img.height < m or img.width < m:
        raise ImageTooSmall(f"image {img.height}x{img.width} is smaller than patch side {m}")


def sample_patches(img: ImageBuffer, cfg: SmashConfig, rng: np.random.Generator) -> list[PatchRecord]:
    """Crop ``cfg.num_patches`` patches at uniform random offsets (with replacement)."""
    m = cfg.patch_side
    _check_size(img, m)
    rows = rng.integers(0, img.height - m + 1, size=cfg.num_patches)
    cols = rng.integers(0, img.width - m + 1, size=cfg.num_patches)
    ii = rows[:, None] + np.arange(m)
    jj = cols[:, None] + np.arange(m)
    blocks = img.data[ii[:, :, None], jj[:, None, :]]
    scores = diversity_batch(blocks)
    return [
        PatchRecord(pixels=blocks[k], origin=(int(rows[k]), int(cols[k])), l_div=int(scores[k]), index=k)
        for k in range(cfg.num_patches)
    ]


def tile_mosaic(patches, grid_side: int) -> ImageBuffer:
    """Place patches row-major on a ``grid_side x grid_side`` grid with hard seams."""
    blocks = np.stack([p.pixels for p in patches])
    n, m, _, c = blocks.shape
    if n != grid_side * grid_side:
        raise ValueError(f"{n} patches do not fill a {grid_side}x{grid_side} grid")
    grid = blocks.reshape(grid_side, grid_side, m, m, c).transpose(0, 2, 1, 3, 4)
    return ImageBuffer(grid.reshape(grid_side * m, grid_side * m, c))


def select_patches(patches: list[PatchRecord], cfg: SmashConfig, rng: np.random.Generator):
    """Return the (rich, poor) patch lists in mosaic placement order."""
    k = cfg.patches_per_mosaic
    if cfg.selection_mode == "random":
        picked = rng.choice(len(patches), size=2 * k, replace=False)
        first = sorted(picked[:k])
        second = sorted(picked[k:])
        return [patches[i] for i in first], [patches[i] for i in second]
    ascending = sorted(patches, key=lambda p: (p.l_div, p.index))
    poor = ascending[:k]
    rich = sorted(ascending[-k:], key=lambda p: (-p.l_div, p.index))
    return rich, poor


def smash_and_reconstruct(img: ImageBuffer, cfg: SmashConfig, rng: np.random.Generator) -> TexturePair:
    """Build the rich and poor texture mosaics.

    The extreme patch sits at the top-left of each mosaic: the richest in
    ``rich`` and the poorest in ``poor``. In ``random`` mode the two
    mosaics are disjoint random subsets in sampling order.
    """
    patches = sample_patches(img, cfg, rng)
    rich, poor = select_patches(patches, cfg, rng)
    g = cfg.grid_side
    return TexturePair(
        rich=tile_mosaic(rich, g),
        poor=tile_mosaic(poor, g),
        grid_side=g,
        rich_patches=tuple(rich),
        poor_patches=tuple(poor),
    )
