"""Synthetic desk-scale real/fake dataset.

Both classes share the same content model: a smooth colour field with a few
high-contrast textured regions. "Real" images then receive spatially
uniform sensor-style noise. "Fake" images mimic a generator that struggles
with rich texture: inside textured regions the fine detail is low-passed
and the noise is suppressed, while flat regions get the same noise as real
images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import ImageBuffer, blur_float, quantize, resize_float, save_png


def _texture_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.12, 0.25, 2) * size
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1.0
    return mask


def make_surrogate_image(label: int, rng: np.random.Generator, size: int = 128) -> ImageBuffer:
    coarse = rng.uniform(60, 190, size=(4, 4, 3))
    base = resize_float(coarse, size, size)
    mask = _texture_mask(rng, size)[:, :, None]
    amp = rng.uniform(25, 45)
    texture = blur_float(rng.standard_normal((size, size)), 0.6)
    texture = (texture / texture.std() * amp)[:, :, None]
    sigma_n = rng.uniform(2.0, 4.0)
    noise = rng.normal(0.0, sigma_n, size=(size, size, 3))
    if label == 0:
        img = base + mask * texture + noise
    else:
        smooth = blur_float(texture[:, :, 0], 1.2)[:, :, None]
        img = base + mask * smooth + (1.0 - mask) * noise
    return ImageBuffer(quantize(img))


def make_surrogate(n: int, seed: int, size: int = 128) -> list[tuple[ImageBuffer, int]]:
    """``n`` balanced samples; sample ``i`` has label ``i % 2``."""
    out = []
    for i in range(n):
        label = i % 2
        rng = np.random.default_rng([seed, i])
        out.append((make_surrogate_image(label, rng, size), label))
    return out


def write_surrogate_dataset(root, n_train: int = 400, n_test: int = 200, seed: int = 0, size: int = 128,
                            generator: str = "surrogate") -> tuple[Path, Path]:
    """Write ``root/train/{0_real,1_fake}`` and ``root/test/<generator>/{0_real,1_fake}`` as PNG."""
    root = Path(root)
    train_dir = root / "train"
    test_dir = root / "test"
    for base, n, s in ((train_dir, n_train, seed), (test_dir / generator, n_test, seed + 1_000_003)):
        for sub in ("0_real", "1_fake"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        for i, (img, label) in enumerate(make_surrogate(n, s, size)):
            sub = "1_fake" if label else "0_real"
            save_png(img, base / sub / f"{i:05d}.png")
    return train_dir, test_dir


def surrogate_config(ablation: str = "full", **kw):
    """Default detector hyperparameters at surrogate scale: 16-pixel patches, 3x3 grids (48x48 mosaics)."""
    from .detector import DetectorConfig
    from .texture import SmashConfig

    return DetectorConfig(smash=SmashConfig(patch_side=16, num_patches=36, patches_per_mosaic=9),
                          ablation=ablation, **kw)


def run_surrogate_experiment(root, ablations=("full", "no_smash"), n_train: int = 400, n_test: int = 200,
                             seed: int = 0, size: int = 128, **cfg_kw) -> dict:
    """Write the dataset under ``root``, train one detector per ablation, evaluate on the test split.

    Returns ``{ablation: (EvalReport, train_seconds)}``.
    """
    import time

    from .benchmark import discover_dataset, labeled_items, run_benchmark
    from .detector import train

    train_dir, test_dir = write_surrogate_dataset(root, n_train, n_test, seed, size)
    items = labeled_items(train_dir)
    folds = discover_dataset(test_dir)
    out = {}
    for ablation in ablations:
        cfg = surrogate_config(ablation, seed=seed, **cfg_kw)
        start = time.perf_counter()
        result = train(cfg, items)
        report = run_benchmark(result.params, cfg, folds, "none")
        out[ablation] = (report, time.perf_counter() - start)
    return out
