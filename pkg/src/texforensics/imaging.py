"""Image I/O, distortions and training-time augmentation.

Images are held as 8-bit ``(H, W, C)`` arrays; the float helpers map them
onto the unit interval for filtering. PNG and baseline JPEG coding is
delegated to Pillow (libjpeg quality scaling of the Annex-K tables).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DegenerateSize, InvalidQuality, MalformedFile, UnsupportedFormat

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
JPEG_MAGIC = b"\xff\xd8"


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Decoded 8-bit raster of shape ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWx1 or HxWx3 array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DegenerateSize(f"empty image {arr.shape}")
        if arr.dtype != np.uint8:
            raise TypeError(f"ImageBuffer stores uint8 samples, got {arr.dtype}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"ImageBuffer({self.height}, {self.width}, {self.channels})"

    def to_float(self, dtype=np.float64) -> np.ndarray:
        """Working view on the unit interval."""
        return self.data.astype(dtype) / 255.0

    @classmethod
    def from_float(cls, arr: np.ndarray) -> "ImageBuffer":
        """Quantize unit-interval samples back to 8 bits."""
        return cls(quantize(np.asarray(arr, dtype=np.float64) * 255.0))

    def to_rgb(self) -> "ImageBuffer":
        if self.channels == 3:
            return self
        return ImageBuffer(np.repeat(self.data, 3, axis=2))


def quantize(values: np.ndarray) -> np.ndarray:
    """Round half away from zero and clip to ``[0, 255]``."""
    v = np.clip(values, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8)


# --------------------------------------------------------------------- codecs


def _from_pil(im: Image.Image) -> ImageBuffer:
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I", "I;16N"):
        arr = np.asarray(im, dtype=np.int64)
        hi = 65535 if mode.startswith("I;16") or arr.max(initial=0) > 255 else 255
        arr = np.floor(arr * 255.0 / hi + 0.5).astype(np.uint8)
        return ImageBuffer(arr)
    if mode in ("1", "L", "LA", "P") and not (mode == "P" and _palette_is_color(im)):
        return ImageBuffer(np.asarray(im.convert("L"), dtype=np.uint8))
    return ImageBuffer(np.asarray(im.convert("RGB"), dtype=np.uint8))


def _palette_is_color(im: Image.Image) -> bool:
    rgb = np.asarray(im.convert("RGB"))
    return not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2]))


def decode_image(data: bytes) -> ImageBuffer:
    """Decode a PNG or baseline JPEG byte stream.

    Grayscale sources come back with one channel; alpha is dropped and any
    ICC profile ignored.
    """
    if data.startswith(PNG_MAGIC):
        fmt = "PNG"
    elif data.startswith(JPEG_MAGIC):
        fmt = "JPEG"
    else:
        raise UnsupportedFormat("only PNG and baseline JPEG streams are supported")
    try:
        im = Image.open(io.BytesIO(data), formats=[fmt])
        if fmt == "JPEG" and (im.info.get("progressive") or im.info.get("progression")):
            raise UnsupportedFormat("progressive JPEG is not supported")
        im.load()
    except UnsupportedFormat:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise MalformedFile(f"corrupt {fmt} stream: {exc}") from exc
    return _from_pil(im)


def _to_pil(img: ImageBuffer) -> Image.Image:
    if img.channels == 1:
        return Image.fromarray(img.data[:, :, 0], mode="L")
    return Image.fromarray(img.data, mode="RGB")


def encode_png(img: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.getvalue()


def encode_jpeg(img: ImageBuffer, qf: int) -> bytes:
    """Baseline sequential JPEG at quality ``qf`` with 4:4:4 chroma."""
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise InvalidQuality(f"JPEG quality must be an integer in 1..100, got {qf!r}")
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="JPEG", quality=int(qf), subsampling=0, optimize=False, progressive=False)
    return buf.getvalue()


def jpeg_roundtrip(img: ImageBuffer, qf: int) -> ImageBuffer:
    out = decode_image(encode_jpeg(img, qf))
    if out.channels != img.channels:
        out = out.to_rgb() if img.channels == 3 else ImageBuffer(out.data[:, :, :1])
    return out


def load_image(path: str | Path) -> ImageBuffer:
    """Read a file from disk and replicate grayscale to three channels."""
    return decode_image(Path(path).read_bytes()).to_rgb()


def save_png(img: ImageBuffer, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(img))


# ---------------------------------------------------------------- distortions


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian of radius ``ceil(3 sigma)``, normalized to sum 1."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # subnormal sigma: off-centre taps vanish
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr, dtype=np.float64)
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def blur_float(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable clamp-to-edge Gaussian blur of an ``(H, W[, C])`` float array."""
    k = gaussian_kernel(sigma)
    if len(k) == 1:
        return np.asarray(arr, dtype=np.float64).copy()
    out = _filter_axis(np.asarray(arr, dtype=np.float64), k, 0)
    return _filter_axis(out, k, 1)


def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img
    return ImageBuffer(quantize(blur_float(img.data.astype(np.float64), sigma)))


def _bilinear_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_float(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    arr = np.asarray(arr, dtype=np.float64)
    if height < 1 or width < 1:
        raise DegenerateSize(f"target size {height}x{width} is empty")
    if arr.shape[:2] == (height, width):
        return arr.copy()
    y0, y1, fy = _bilinear_axis(arr.shape[0], height)
    x0, x1, fx = _bilinear_axis(arr.shape[1], width)
    extra = (None,) * (arr.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    if (height, width) == (img.height, img.width):
        return img
    return ImageBuffer(quantize(resize_float(img.data, height, width)))


def downsample(img: ImageBuffer, ratio: float) -> ImageBuffer:
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    h = int(math.floor(img.height * ratio + 0.5))
    w = int(math.floor(img.width * ratio + 0.5))
    if h < 1 or w < 1:
        raise DegenerateSize(f"downsampling {img.height}x{img.width} by {ratio} leaves an empty image")
    return resize(img, h, w)


def center_crop_resize(img: ImageBuffer, side: int) -> ImageBuffer:
    """Largest centered square crop, then bilinear resize to ``side``."""
    s = min(img.height, img.width)
    top = (img.height - s) // 2
    left = (img.width - s) // 2
    crop = ImageBuffer(img.data[top:top + s, left:left + s])
    return resize(crop, side, side)


# --------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    jpeg_prob: float = 0.1
    jpeg_qf_range: tuple[int, int] = (70, 100)
    blur_prob: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.0, 1.0)
    downsample_prob: float = 0.1
    downsample_ratio_range: tuple[float, float] = (0.25, 0.5)
    seed: int = 0

    def __post_init__(self):
        for name in ("jpeg_prob", "blur_prob", "downsample_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.jpeg_qf_range
        if not 1 <= lo <= hi <= 100:
            raise ValueError(f"jpeg_qf_range must be within [1, 100], got {self.jpeg_qf_range}")
        lo, hi = self.blur_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"bad blur_sigma_range {self.blur_sigma_range}")
        lo, hi = self.downsample_ratio_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"downsample_ratio_range must be within (0, 1], got {self.downsample_ratio_range}")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(jpeg_prob=0.0, blur_prob=0.0, downsample_prob=0.0, seed=seed)


@dataclass(frozen=True)
class AugmentPlan:
    """Which augmentations fire for one draw, with their parameters (``None`` = skipped)."""

    jpeg_qf: int | None
    blur_sigma: float | None
    downsample_ratio: float | None


def plan_augment(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentPlan:
    # Every draw consumes the same number of variates so the stream stays aligned.
    u = rng.random(3)
    qf = int(rng.integers(policy.jpeg_qf_range[0], policy.jpeg_qf_range[1] + 1))
    sigma = float(rng.uniform(*policy.blur_sigma_range))
    ratio = float(rng.uniform(*policy.downsample_ratio_range))
    return AugmentPlan(
        jpeg_qf=qf if u[0] < policy.jpeg_prob else None,
        blur_sigma=sigma if u[1] < policy.blur_prob else None,
        downsample_ratio=ratio if u[2] < policy.downsample_prob else None,
    )


def execute_plan(img: ImageBuffer, plan: AugmentPlan, min_side: int = 1) -> ImageBuffer:
    """Apply JPEG, then blur, then downsample.

    ``min_side`` raises the downsampling ratio when needed so that neither
    dimension drops below it.
    """
    if plan.jpeg_qf is not None:
        img = jpeg_roundtrip(img, plan.jpeg_qf)
    if plan.blur_sigma is not None:
        img = gaussian_blur(img, plan.blur_sigma)
    if plan.downsample_ratio is not None:
        floor_ratio = min_side / min(img.height, img.width)
        ratio = min(1.0, max(plan.downsample_ratio, floor_ratio))
        img = downsample(img, ratio)
    return img


def apply_augment(img: ImageBuffer, policy: AugmentPolicy, rng: np.random.Generator,
                  min_side: int = 1) -> ImageBuffer:
    return execute_plan(img, plan_augment(policy, rng), min_side=min_side)
