"""Per-generator evaluation: accuracy, average precision, distortions, ablations."""

from __future__ import annotations

import csv
from fractions import Fraction
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .detector import (
    DetectorConfig,
    config_to_flat,
    detector_spec,
    predict_scores,
    train,
    with_ablation,
    with_patch_side,
)
from .errors import EmptyInput, MalformedFile, MissingSubfolder, NoPositives
from .fingerprint import FilterBank, default_filter_bank
from .imaging import ImageBuffer, downsample, gaussian_blur, jpeg_roundtrip, load_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
REAL_DIR, FAKE_DIR = "0_real", "1_fake"
MANIFEST = "dataset.cfg"

DISTORTIONS = {
    "none": {},
    "jpeg95": {"qf": 95},
    "blur1": {"sigma": 1.0},
    "half_size": {"ratio": 0.5},
}


# --------------------------------------------------------------------- metrics


def _decisions(scores, labels) -> tuple[int, int]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise EmptyInput("accuracy of an empty prediction list")
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return int(((s >= 0.5) == (y == 1)).sum()), s.size


def accuracy(scores, labels) -> float:
    """Percentage of ``score >= 0.5`` decisions that match the label."""
    correct, n = _decisions(scores, labels)
    # One rounding from integer counts keeps accuracy + error_rate == 100.
    return 100 * correct / n


def error_rate(scores, labels) -> float:
    correct, n = _decisions(scores, labels)
    return 100 * (n - correct) / n


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive, scores descending.

    Ties keep input order (stable sort). The sum is exact and rounded once.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    ranks = np.flatnonzero(y[order] == 1) + 1
    total = sum((Fraction(i + 1, int(r)) for i, r in enumerate(ranks)), Fraction(0))
    return float(100 * total / n_pos)


# --------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class GeneratorFold:
    name: str
    real_paths: tuple[Path, ...]
    fake_paths: tuple[Path, ...]

    @property
    def balanced(self) -> bool:
        return len(self.real_paths) == len(self.fake_paths)

    def items(self) -> list[tuple[Path, int]]:
        return [(p, 0) for p in self.real_paths] + [(p, 1) for p in self.fake_paths]


def _list_images(folder: Path) -> tuple[Path, ...]:
    return tuple(sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES))


@dataclass(frozen=True)
class FolderNames:
    real: str = REAL_DIR
    fake: str = FAKE_DIR


def read_folder_names(root) -> FolderNames:
    """Class folder names from an optional ``dataset.cfg`` (``real_dir = ...``, ``fake_dir = ...``)."""
    path = Path(root) / MANIFEST
    if not path.is_file():
        return FolderNames()
    keys = {"real_dir": "real", "fake_dir": "fake"}
    found = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in keys or not value:
            raise MalformedFile(f"{path}:{lineno}: expected real_dir = NAME or fake_dir = NAME")
        found[keys[key]] = value
    return FolderNames(**found)


def fold_from_dir(path: Path, name: str | None = None, names: FolderNames = FolderNames()) -> GeneratorFold:
    path = Path(path)
    for sub in (names.real, names.fake):
        if not (path / sub).is_dir():
            raise MissingSubfolder(f"missing subfolder {path / sub}")
    fold = GeneratorFold(name or path.name, _list_images(path / names.real), _list_images(path / names.fake))
    if not fold.real_paths or not fold.fake_paths:
        log.warning("fold %s is empty (%d real, %d fake)", fold.name, len(fold.real_paths), len(fold.fake_paths))
    elif not fold.balanced:
        log.warning("fold %s is unbalanced (%d real, %d fake)", fold.name, len(fold.real_paths), len(fold.fake_paths))
    return fold


def discover_dataset(root) -> list[GeneratorFold]:
    """Folds from ``root/<generator>/{0_real,1_fake}``, sorted by name.

    A root that itself holds the class folders is a single fold named after
    the directory. A ``dataset.cfg`` in ``root`` may rename the class folders.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    names = read_folder_names(root)
    if (root / names.real).is_dir() or (root / names.fake).is_dir():
        return [fold_from_dir(root, names=names)]
    gens = sorted(p for p in root.iterdir() if p.is_dir())
    if not gens:
        raise MissingSubfolder(f"no generator folders under {root}")
    return [fold_from_dir(p, names=names) for p in gens]


def labeled_items(root) -> list[tuple[Path, int]]:
    """All (path, label) pairs below ``root`` in fold order."""
    items = []
    for fold in discover_dataset(root):
        items.extend(fold.items())
    return items


# --------------------------------------------------------------------- reports


@dataclass(frozen=True)
class FoldResult:
    name: str
    n_real: int
    n_fake: int
    accuracy: float
    average_precision: float


@dataclass
class EvalReport:
    rows: list[FoldResult]
    distortion: str
    ablation: str
    metadata: dict = field(default_factory=dict)

    @property
    def mean(self) -> FoldResult:
        if not self.rows:
            return FoldResult("__mean__", 0, 0, float("nan"), float("nan"))
        return FoldResult(
            "__mean__",
            sum(r.n_real for r in self.rows),
            sum(r.n_fake for r in self.rows),
            float(np.mean([r.accuracy for r in self.rows])),
            float(np.mean([r.average_precision for r in self.rows])),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["generator", "n_real", "n_fake", "accuracy", "avg_precision"])
        for r in [*self.rows, self.mean]:
            w.writerow([r.name, r.n_real, r.n_fake, f"{r.accuracy:.4f}", f"{r.average_precision:.4f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        def row(r):
            return {"generator": r.name, "n_real": r.n_real, "n_fake": r.n_fake,
                    "accuracy": r.accuracy, "avg_precision": r.average_precision}
        doc = {
            "distortion": self.distortion,
            "ablation": self.ablation,
            "metadata": self.metadata,
            "rows": [row(r) for r in self.rows],
            "mean": row(self.mean),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, csv_path) -> Path:
        """Write the CSV and a JSON mirror next to it; returns the JSON path."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path = csv_path.with_suffix(".json")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return json_path


# ------------------------------------------------------------------ benchmark


def distort(img: ImageBuffer, distortion: str) -> ImageBuffer:
    if distortion not in DISTORTIONS:
        raise ValueError(f"unknown distortion {distortion!r}; choose from {sorted(DISTORTIONS)}")
    if distortion == "jpeg95":
        return jpeg_roundtrip(img, DISTORTIONS[distortion]["qf"])
    if distortion == "blur1":
        return gaussian_blur(img, DISTORTIONS[distortion]["sigma"])
    if distortion == "half_size":
        return downsample(img, DISTORTIONS[distortion]["ratio"])
    return img


def params_hash(params: nn.ModelParams) -> str:
    return hashlib.sha256(nn.checkpoint_bytes(params)).hexdigest()


def run_benchmark(params: nn.ModelParams, cfg: DetectorConfig, folds: Sequence[GeneratorFold],
                  distortion: str = "none", bank: FilterBank | None = None,
                  ablation_label: str | None = None) -> EvalReport:
    """Score every fold (both classes distorted alike) and tabulate accuracy / AP."""
    if distortion not in DISTORTIONS:
        raise ValueError(f"unknown distortion {distortion!r}; choose from {sorted(DISTORTIONS)}")
    if not folds:
        raise EmptyInput("no folds to evaluate")
    bank = bank or default_filter_bank()
    spec = detector_spec(cfg, bank)
    rows = []
    for fold in folds:
        if not fold.real_paths or not fold.fake_paths:
            log.warning("skipping fold %s: needs both real and fake images", fold.name)
            continue
        items = fold.items()
        images = [distort(load_image(p), distortion) for p, _ in items]
        labels = np.array([lbl for _, lbl in items])
        scores = predict_scores(spec, params, cfg, images, bank)
        rows.append(FoldResult(fold.name, len(fold.real_paths), len(fold.fake_paths),
                               accuracy(scores, labels), average_precision(scores, labels)))
    metadata = {
        "seed": cfg.seed,
        "eval_seed": cfg.eval_seed,
        "eval_seeds": cfg.eval_seeds,
        "ablation": cfg.ablation,
        "distortion": distortion,
        "distortion_params": DISTORTIONS[distortion],
        "patch_side": cfg.smash.patch_side,
        "patches_per_mosaic": cfg.smash.patches_per_mosaic,
        "num_patches": cfg.smash.num_patches,
        "checkpoint_sha256": params_hash(params),
    }
    return EvalReport(rows, distortion, ablation_label or cfg.ablation, metadata)


# ------------------------------------------------------------------- ablations


ABLATION_SUITE = ("full", "no_smash", "no_boundary", "no_contrast", "no_hpf")
PATCH_SWEEP = (16, 32, 64)


def ablation_configs(base: DetectorConfig, ablations: Sequence[str] = ABLATION_SUITE,
                     patch_sides: Sequence[int] = PATCH_SWEEP) -> list[tuple[str, DetectorConfig]]:
    """Named configs: one per ablation, plus full-model patch-size variants.

    Patch variants keep the mosaic side of ``base`` fixed; the side equal to
    the base patch side is covered by ``full``.
    """
    out = [(a, with_ablation(base, a)) for a in ablations]
    mosaic = base.smash.mosaic_side
    for m in patch_sides:
        if m == base.smash.patch_side or mosaic % m:
            continue
        out.append((f"patch_{m}", with_patch_side(with_ablation(base, "full"), m)))
    return out


def run_ablation_suite(train_items, folds: Sequence[GeneratorFold], base: DetectorConfig,
                       ablations: Sequence[str] = ABLATION_SUITE, distortions: Sequence[str] = ("none",),
                       patch_sides: Sequence[int] = PATCH_SWEEP, bank: FilterBank | None = None,
                       on_trained: Callable | None = None) -> list[EvalReport]:
    """Train one detector per ablation config and evaluate it under each distortion."""
    bank = bank or default_filter_bank()
    reports = []
    for label, cfg in ablation_configs(base, ablations, patch_sides):
        log.info("ablation %s: training", label)
        result = train(cfg, train_items, bank)
        if on_trained:
            on_trained(label, cfg, result)
        for d in distortions:
            report = run_benchmark(result.params, cfg, folds, d, bank, ablation_label=label)
            recorded = config_to_flat(cfg)
            recorded.pop("workers")
            report.metadata["config"] = recorded
            reports.append(report)
    return reports
