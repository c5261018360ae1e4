"""High-pass residual filtering and the rich/poor contrast fingerprint.

The filter bank holds 30 integer residual kernels in five rotation
families plus two isotropic kernels:

* (a) first order ``[-1, 1]``, 8 rotations (3x3)
* (b) third order ``[1, -3, 3, -1]``, 8 rotations (5x5)
* (c) second order ``[1, -2, 1]``, 4 rotations (3x3, symmetric so the
  reverse directions coincide)
* (d) EDGE 3x3 and (e) EDGE 5x5, 4 rotations each
* SQUARE 3x3 and SQUARE 5x5

Each kernel is divided by ``q``, the sum of its positive coefficients, so
responses on unit-interval input stay within ``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .errors import ImageTooSmall, ShapeMismatch
from .imaging import ImageBuffer, center_crop_resize
from .texture import SmashConfig, smash_and_reconstruct

FORMAT_TAG = "texforensics-filterbank"
FORMAT_VERSION = 1
DIRECTIONS_8 = ("E", "SE", "S", "SW", "W", "NW", "N", "NE")
ABLATIONS = ("full", "no_smash", "no_boundary", "no_contrast", "no_hpf")


@dataclass(frozen=True, eq=False)
class Kernel:
    name: str
    coeffs: np.ndarray  # integer grid, 3x3 or 5x5
    q: int

    @property
    def size(self) -> int:
        return self.coeffs.shape[0]

    def normalized(self) -> np.ndarray:
        return self.coeffs.astype(np.float64) / self.q

    def __eq__(self, other):
        return (isinstance(other, Kernel) and self.name == other.name and self.q == other.q
                and np.array_equal(self.coeffs, other.coeffs))


@dataclass(frozen=True)
class FilterBank:
    kernels: tuple[Kernel, ...]

    def __len__(self):
        return len(self.kernels)

    @property
    def max_size(self) -> int:
        return max(k.size for k in self.kernels)

    def stacked(self, normalized: bool = True) -> np.ndarray:
        """All kernels centered in a common ``(K, S, S)`` grid (raw integers if not ``normalized``)."""
        s = self.max_size
        out = np.zeros((len(self.kernels), s, s))
        for i, k in enumerate(self.kernels):
            o = (s - k.size) // 2
            out[i, o:o + k.size, o:o + k.size] = k.normalized() if normalized else k.coeffs
        return out

    @property
    def divisors(self) -> np.ndarray:
        return np.array([k.q for k in self.kernels], dtype=np.float64)


# --------------------------------------------------------------- construction


def _ring(n: int, depth: int) -> list[tuple[int, int]]:
    """Clockwise cell coordinates of ring ``depth`` of an ``n x n`` grid."""
    lo, hi = depth, n - 1 - depth
    cells = [(lo, j) for j in range(lo, hi)]
    cells += [(i, hi) for i in range(lo, hi)]
    cells += [(hi, j) for j in range(hi, lo, -1)]
    cells += [(i, lo) for i in range(hi, lo, -1)]
    return cells


def rotate45(grid: np.ndarray) -> np.ndarray:
    """Rotate a square odd-sized grid clockwise by one eighth turn.

    Ring ``r`` (counting outward from the center) holds ``8 r`` cells and is
    shifted by ``r`` positions, which maps axis-aligned lines onto diagonals.
    """
    n = grid.shape[0]
    out = grid.copy()
    for depth in range(n // 2):
        cells = _ring(n, depth)
        shift = len(cells) // 8
        vals = [grid[c] for c in cells]
        for i, c in enumerate(cells):
            out[c] = vals[(i - shift) % len(cells)]
    return out


def _family(base: np.ndarray, prefix: str, count: int, step: int, labels) -> list[Kernel]:
    q = int(base[base > 0].sum())
    kernels, g = [], base
    for i in range(count):
        kernels.append(Kernel(f"{prefix}_{labels[i]}", g.astype(np.int64), q))
        for _ in range(step):
            g = rotate45(g)
    return kernels


def build_filter_bank() -> FilterBank:
    first = np.zeros((3, 3), dtype=np.int64)
    first[1, 1:] = [-1, 1]
    third = np.zeros((5, 5), dtype=np.int64)
    third[2, 1:] = [1, -3, 3, -1]
    second = np.zeros((3, 3), dtype=np.int64)
    second[1] = [1, -2, 1]
    edge3 = np.array([[-1, 2, -1], [2, -4, 2], [0, 0, 0]], dtype=np.int64)
    square3 = np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]], dtype=np.int64)
    square5 = np.array([
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ], dtype=np.int64)
    edge5 = square5.copy()
    edge5[3:] = 0

    kernels = []
    kernels += _family(first, "a_first", 8, 1, DIRECTIONS_8)
    kernels += _family(third, "b_third", 8, 1, DIRECTIONS_8)
    kernels += _family(second, "c_second", 4, 1, ("E", "SE", "S", "SW"))
    kernels += _family(edge3, "d_edge3", 4, 2, ("N", "E", "S", "W"))
    kernels += _family(edge5, "e_edge5", 4, 2, ("N", "E", "S", "W"))
    kernels.append(Kernel("square3", square3, int(square3[square3 > 0].sum())))
    kernels.append(Kernel("square5", square5, int(square5[square5 > 0].sum())))
    return FilterBank(tuple(kernels))


# ------------------------------------------------------------------ data file


def format_filter_bank(bank: FilterBank) -> str:
    lines = ["# high-pass residual filter bank: one block per kernel",
             f"format {FORMAT_TAG} {FORMAT_VERSION}", ""]
    for k in bank.kernels:
        lines += [f"kernel {k.name}", f"size {k.size}", f"q {k.q}"]
        lines += [" ".join(f"{v:3d}" for v in row) for row in k.coeffs]
        lines += ["end", ""]
    return "\n".join(lines)


def parse_filter_bank(text: str) -> FilterBank:
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].split()[:2] != ["format", FORMAT_TAG]:
        raise ValueError("not a filter bank file")
    version = int(lines[0].split()[2])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported filter bank version {version}")
    kernels, i = [], 1
    while i < len(lines):
        name = lines[i].split(maxsplit=1)[1]
        size = int(lines[i + 1].split()[1])
        q = int(lines[i + 2].split()[1])
        rows = [[int(v) for v in lines[i + 3 + r].split()] for r in range(size)]
        if lines[i + 3 + size] != "end":
            raise ValueError(f"kernel {name}: missing 'end'")
        coeffs = np.array(rows, dtype=np.int64)
        if coeffs.shape != (size, size):
            raise ValueError(f"kernel {name}: expected {size}x{size} grid")
        if q <= 0:
            raise ValueError(f"kernel {name}: divisor must be positive")
        kernels.append(Kernel(name, coeffs, q))
        i += 4 + size
    return FilterBank(tuple(kernels))


def load_filter_bank(path) -> FilterBank:
    return parse_filter_bank(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_filter_bank() -> FilterBank:
    """The shipped 30-kernel bank from ``data/srm30.txt``."""
    text = resources.files("texforensics").joinpath("data/srm30.txt").read_text(encoding="utf-8")
    return parse_filter_bank(text)


# ------------------------------------------------------------------ filtering


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (C, H, W)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class Fingerprint:
    data: np.ndarray  # (C_f, H_f, W_f)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def to_plane(img) -> np.ndarray:
    """Channel-mean float plane on the unit interval."""
    if isinstance(img, ImageBuffer):
        return img.to_float().mean(axis=2)
    arr = np.asarray(img, dtype=np.float64)
    return arr.mean(axis=2) if arr.ndim == 3 else arr


def filter_plane(plane: np.ndarray, bank: FilterBank, mode: str = "cross_boundary",
                 patch_side: int | None = None, scale: float = 1.0) -> np.ndarray:
    """Correlate a float plane with every normalized kernel, clamp-to-edge padding.

    The integer kernel grids are applied first and the result multiplied by
    ``scale / q`` per kernel, so integer-valued planes filter exactly.
    """
    if mode not in ("cross_boundary", "per_patch"):
        raise ValueError(f"unknown filter mode {mode!r}")
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    s = bank.max_size
    if h < s or w < s:
        raise ImageTooSmall(f"image {h}x{w} smaller than the {s}x{s} filter support")
    kern = bank.stacked(normalized=False)
    factor = (scale / bank.divisors)[:, None, None]
    r = s // 2
    if mode == "cross_boundary":
        padded = np.pad(plane, r, mode="edge")
        win = sliding_window_view(padded, (s, s))
        return np.tensordot(kern, win, axes=([1, 2], [2, 3])) * factor
    m = patch_side
    if not m or h % m or w % m:
        raise ValueError(f"per_patch filtering needs dimensions divisible by patch_side ({h}x{w}, {m})")
    tiles = plane.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3)
    padded = np.pad(tiles, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    win = sliding_window_view(padded, (s, s), axis=(2, 3))
    out = np.tensordot(kern, win, axes=([1, 2], [4, 5]))  # (K, gh, gw, m, m)
    return out.transpose(0, 1, 3, 2, 4).reshape(len(bank), h, w) * factor


def filter_image(img: ImageBuffer, bank: FilterBank, mode: str = "cross_boundary",
                 patch_side: int | None = None) -> np.ndarray:
    """Filter the channel mean of an 8-bit image; integer channel sums keep constants exactly zero."""
    total = img.data.sum(axis=2, dtype=np.int64).astype(np.float64)
    return filter_plane(total, bank, mode, patch_side, scale=1.0 / (255.0 * img.channels))


def apply_filter_bank(img, bank: FilterBank, mode: str = "cross_boundary",
                      patch_side: int | None = None) -> FeatureMap:
    if isinstance(img, ImageBuffer):
        return FeatureMap(filter_image(img, bank, mode, patch_side).astype(np.float32))
    return FeatureMap(filter_plane(to_plane(img), bank, mode, patch_side).astype(np.float32))


# --------------------------------------------------------- learnable block


def block_spec(channels: int = 30) -> list[nn.LayerSpec]:
    """Conv 3x3 (channels -> channels) + BatchNorm + Hardtanh[-1, 1]."""
    return [nn.conv("block.conv", channels, channels, 3), nn.batchnorm("block.bn", channels), nn.hardtanh(-1.0, 1.0)]


def conv_block_forward(fm: FeatureMap, params: nn.ModelParams, mode: str = "eval") -> FeatureMap:
    expected = params["block.conv.weight"].shape[1]
    if fm.channels != expected:
        raise ShapeMismatch(f"block expects {expected} channels, got {fm.channels}")
    spec = block_spec(fm.channels)
    y, _ = nn.forward(spec, params, fm.data[None], mode)
    return FeatureMap(y[0])


def is_contrast(ablation: str) -> bool:
    return ablation in ("full", "no_boundary", "no_hpf")


def feature_channels(ablation: str, bank: FilterBank | None = None) -> int:
    if ablation == "no_hpf":
        return 3
    return len(bank if bank is not None else default_filter_bank())


def prepare_branches(img: ImageBuffer, cfg: SmashConfig, bank: FilterBank, ablation: str = "full",
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Parameter-free part of extraction: mosaics (or the raw image) after filtering.

    Returns a float32 array ``(B, C, S, S)`` with ``B = 2`` (rich, poor) for
    the contrast variants and ``B = 1`` otherwise.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    img = img.to_rgb()
    side = cfg.mosaic_side
    if ablation == "no_smash":
        if img.height < cfg.patch_side or img.width < cfg.patch_side:
            raise ImageTooSmall(f"image {img.height}x{img.width} is smaller than patch side {cfg.patch_side}")
        return filter_image(center_crop_resize(img, side), bank)[None].astype(np.float32)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if ablation == "no_contrast":
        pair = smash_and_reconstruct(img, _with_mode(cfg, "random"), rng)
        return filter_image(pair.rich, bank)[None].astype(np.float32)
    pair = smash_and_reconstruct(img, _with_mode(cfg, "texture_sorted"), rng)
    if ablation == "no_hpf":
        return np.stack([pair.rich.to_float(np.float32).transpose(2, 0, 1),
                         pair.poor.to_float(np.float32).transpose(2, 0, 1)])
    mode = "per_patch" if ablation == "no_boundary" else "cross_boundary"
    return np.stack([filter_image(pair.rich, bank, mode, cfg.patch_side),
                     filter_image(pair.poor, bank, mode, cfg.patch_side)]).astype(np.float32)


def _with_mode(cfg: SmashConfig, mode: str) -> SmashConfig:
    if cfg.selection_mode == mode:
        return cfg
    return SmashConfig(cfg.patch_side, cfg.num_patches, cfg.patches_per_mosaic, cfg.seed, mode)


def fingerprint_from_branches(branches: np.ndarray, params: nn.ModelParams) -> np.ndarray:
    """Eval-mode block on each branch; two branches give their difference."""
    spec = block_spec(branches.shape[1])
    y, _ = nn.forward(spec, params, branches, "eval")
    return y[0] - y[1] if len(y) == 2 else y[0]


def extract_fingerprint(img: ImageBuffer, cfg: SmashConfig, bank: FilterBank, params: nn.ModelParams,
                        ablation: str = "full", rng: np.random.Generator | None = None) -> Fingerprint:
    """Contrast fingerprint ``block(filter(rich)) - block(filter(poor))``.

    ``no_smash`` and ``no_contrast`` produce a single-branch map instead.
    """
    branches = prepare_branches(img, cfg, bank, ablation, rng)
    return Fingerprint(fingerprint_from_branches(branches, params))
