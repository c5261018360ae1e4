"""Full detector: fingerprint block + cascaded CNN classifier, training and inference.

Label convention: 1 = fake, 0 = real.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import EmptyDataset, SingleClassDataset
from .fingerprint import (
    ABLATIONS,
    FilterBank,
    block_spec,
    default_filter_bank,
    feature_channels,
    is_contrast,
    prepare_branches,
)
from .imaging import AugmentPolicy, ImageBuffer, apply_augment, load_image
from .texture import SmashConfig

log = logging.getLogger(__name__)

REAL, FAKE = 0, 1


@dataclass(frozen=True)
class DetectorConfig:
    smash: SmashConfig = field(default_factory=SmashConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    ablation: str = "full"
    patience: int = 5
    val_fraction: float = 0.1
    eval_seed: int = 0
    eval_seeds: int = 1
    workers: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.eval_seeds < 1 or self.workers < 1:
            raise ValueError("eval_seeds and workers must be >= 1")

    @property
    def filter_mode(self) -> str:
        return "per_patch" if self.ablation == "no_boundary" else "cross_boundary"


@dataclass(frozen=True)
class TableRow:
    kind: str  # conv | avgpool | adaptive_avgpool | flatten | fc
    kernels: int | None = None
    batchnorm: bool = False
    activation: str | None = None


def classifier_table() -> list[TableRow]:
    conv = TableRow("conv", 32, True, "relu")
    pool = TableRow("avgpool")
    return [conv, conv, conv, conv, pool, conv, conv, pool, conv, conv, pool, conv, conv,
            TableRow("adaptive_avgpool"), TableRow("flatten"), TableRow("fc")]


def expand_table(rows: Sequence[TableRow], in_channels: int) -> list[nn.LayerSpec]:
    layers, ch = [], in_channels
    for i, row in enumerate(rows):
        if row.kind == "conv":
            layers.append(nn.conv(f"cls.{i}.conv", ch, row.kernels, 3, stride=1, padding=1, bias=not row.batchnorm))
            ch = row.kernels
            if row.batchnorm:
                layers.append(nn.batchnorm(f"cls.{i}.bn", ch))
            if row.activation == "relu":
                layers.append(nn.relu())
        elif row.kind == "avgpool":
            layers.append(nn.avgpool(2, 2))
        elif row.kind == "adaptive_avgpool":
            layers.append(nn.adaptive_avgpool((1, 1)))
        elif row.kind == "flatten":
            layers.append(nn.flatten())
        elif row.kind == "fc":
            layers.append(nn.fully_connected(f"cls.{i}.fc", ch, 1))
        else:
            raise ValueError(f"unknown table row {row.kind}")
    return layers


@dataclass(frozen=True)
class DetectorSpec:
    block: tuple[nn.LayerSpec, ...]
    classifier: tuple[nn.LayerSpec, ...]
    table: tuple[TableRow, ...]
    in_channels: int
    contrast: bool


def detector_spec(cfg: DetectorConfig, bank: FilterBank | None = None) -> DetectorSpec:
    ch = feature_channels(cfg.ablation, bank)
    table = classifier_table()
    return DetectorSpec(tuple(block_spec(ch)), tuple(expand_table(table, ch)), tuple(table), ch,
                        is_contrast(cfg.ablation))


def build_detector(cfg: DetectorConfig, bank: FilterBank | None = None, dtype=np.float32):
    """Layer spec and freshly initialized parameters (seeded by ``cfg.seed``)."""
    spec = detector_spec(cfg, bank)
    rng = np.random.default_rng(cfg.seed)
    params = nn.init_params(spec.block, rng, dtype)
    nn.init_params(spec.classifier, rng, dtype, params)
    return spec, params


# -------------------------------------------------------------------- network


@dataclass
class NetworkCache:
    block: nn.ForwardCache
    classifier: nn.ForwardCache
    batch: int
    branches: int


def network_forward(spec: DetectorSpec, params: nn.ModelParams, branches: np.ndarray, mode: str = "eval"):
    """Logits for a batch of prepared inputs ``(N, B, C, S, S)``.

    Both branches pass through the block as one batch, so BatchNorm sees
    shared statistics for rich and poor mosaics.
    """
    n, b = branches.shape[:2]
    x = branches.transpose(1, 0, 2, 3, 4).reshape(n * b, *branches.shape[2:])
    yb, cb = nn.forward(spec.block, params, x, mode)
    t = yb[:n] - yb[n:] if b == 2 else yb
    z, cc = nn.forward(spec.classifier, params, t, mode)
    return z[:, 0], NetworkCache(cb, cc, n, b)


def network_backward(spec: DetectorSpec, params: nn.ModelParams, cache: NetworkCache, dz: np.ndarray):
    grads, dt = nn.backward(spec.classifier, params, cache.classifier, np.asarray(dz).reshape(-1, 1))
    dyb = np.concatenate([dt, -dt]) if cache.branches == 2 else dt
    gb, dx = nn.backward(spec.block, params, cache.block, dyb)
    grads.update(gb)
    n, b = cache.batch, cache.branches
    dx = dx.reshape(b, n, *dx.shape[1:]).transpose(1, 0, 2, 3, 4)
    return grads, dx


def loss_and_grads(spec: DetectorSpec, params: nn.ModelParams, branches: np.ndarray, labels):
    """One train-mode forward/backward; returns ``(loss, grads, logits, dinput)``."""
    z, cache = network_forward(spec, params, branches, "train")
    loss, dz = nn.bce_with_logits(z, labels)
    grads, dx = network_backward(spec, params, cache, dz)
    return loss, grads, z, dx


# ----------------------------------------------------------------------- data


def _parallel_map(fn: Callable, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _as_image(item) -> ImageBuffer:
    return item.to_rgb() if isinstance(item, ImageBuffer) else load_image(item)


def item_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def prepare_training_item(cfg: DetectorConfig, bank: FilterBank, image, index: int, epoch: int) -> np.ndarray:
    """Augment and extract filter responses for one training sample.

    Randomness depends only on ``(seed, epoch, index)`` so worker count never
    changes results.
    """
    rng = item_rng(cfg.seed, 3, epoch, index)
    img = apply_augment(_as_image(image), cfg.augment, rng, min_side=cfg.smash.patch_side)
    return prepare_branches(img, cfg.smash, bank, cfg.ablation, rng)


def prepare_eval_item(cfg: DetectorConfig, bank: FilterBank, image, seed_offset: int = 0) -> np.ndarray:
    rng = np.random.default_rng(cfg.eval_seed + seed_offset)
    return prepare_branches(_as_image(image), cfg.smash, bank, cfg.ablation, rng)


def stratified_split(labels: Sequence[int], fraction: float, seed: int):
    """Seeded per-class split into (train_indices, val_indices)."""
    labels = np.asarray(labels)
    rng = item_rng(seed, 1)
    train_idx, val_idx = [], []
    for cls in (REAL, FAKE):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        n_val = min(n_val, len(idx) - 1)
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return sorted(train_idx), sorted(val_idx)


def check_dataset(dataset) -> list[int]:
    if len(dataset) == 0:
        raise EmptyDataset("training dataset is empty")
    labels = [int(lbl) for _, lbl in dataset]
    if any(lbl not in (REAL, FAKE) for lbl in labels):
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    if len(set(labels)) < 2:
        raise SingleClassDataset("training dataset must contain both real and fake images")
    return labels


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    spec: DetectorSpec
    params: nn.ModelParams
    history: list[dict]
    best_epoch: int
    best_val_acc: float | None


def train(cfg: DetectorConfig, dataset: Sequence[tuple], bank: FilterBank | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on ``(image_or_path, label)`` pairs.

    A stratified ``val_fraction`` holdout drives best-checkpoint selection and
    early stopping (``patience`` epochs without improvement).
    """
    bank = bank or default_filter_bank()
    labels = check_dataset(dataset)
    spec, params = build_detector(cfg, bank)
    train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
    history: list[dict] = []
    best = (None, -1.0, 0)  # params, val_acc, epoch
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.asarray(train_idx)[item_rng(cfg.seed, 2, epoch).permutation(len(train_idx))]
        losses, correct = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            inputs = _parallel_map(
                lambda i: prepare_training_item(cfg, bank, dataset[i][0], int(i), epoch), idx, cfg.workers)
            y = np.array([labels[i] for i in idx], dtype=np.float64)
            loss, grads, z, _ = loss_and_grads(spec, params, np.stack(inputs), y)
            nn.adam_step(params, grads, cfg.lr)
            losses.append(loss * len(idx))
            correct += int(((z >= 0) == (y == 1)).sum())
        record = {
            "epoch": epoch,
            "loss": float(sum(losses) / len(order)),
            "train_acc": 100.0 * correct / len(order),
            "val_acc": None,
        }
        if val_idx:
            scores = predict_scores(spec, params, cfg, [dataset[i][0] for i in val_idx], bank)
            val_labels = np.array([labels[i] for i in val_idx])
            record["val_acc"] = 100.0 * float(((scores >= 0.5) == (val_labels == 1)).mean())
        history.append(record)
        log.info("epoch %d loss %.4f train_acc %.2f val_acc %s", epoch, record["loss"], record["train_acc"],
                 record["val_acc"])
        if on_epoch:
            on_epoch(record)
        if not val_idx:
            best = (params.copy(), -1.0, epoch)
            continue
        if record["val_acc"] > best[1]:
            best, stale = (params.copy(), record["val_acc"], epoch), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best[0] is None:
        best = (params.copy(), -1.0, 0)
    return TrainResult(spec, best[0], history, best[2], best[1] if val_idx else None)


# -------------------------------------------------------------------- predict


@dataclass(frozen=True)
class Prediction:
    score: float
    label: str
    per_seed: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        out = {"score": self.score, "label": self.label}
        if len(self.per_seed) > 1:
            out["per_seed"] = list(self.per_seed)
        return out


def label_for(score: float) -> str:
    return "fake" if score >= 0.5 else "real"


def predict_scores(spec: DetectorSpec, params: nn.ModelParams, cfg: DetectorConfig, images,
                   bank: FilterBank | None = None, seeds: int | None = None) -> np.ndarray:
    """Eval-mode fake probabilities, averaged over ``seeds`` patch samplings."""
    bank = bank or default_filter_bank()
    k = seeds or cfg.eval_seeds
    return predict_score_matrix(spec, params, cfg, images, bank, k).mean(axis=1)


def predict_score_matrix(spec, params, cfg, images, bank, k: int) -> np.ndarray:
    images = list(images)
    jobs = [(i, s) for i in range(len(images)) for s in range(k)]
    out = np.empty(len(jobs))
    chunk = max(1, cfg.batch_size)
    for start in range(0, len(jobs), chunk):
        part = jobs[start:start + chunk]
        inputs = _parallel_map(lambda job: prepare_eval_item(cfg, bank, images[job[0]], job[1]), part, cfg.workers)
        z, _ = network_forward(spec, params, np.stack(inputs), "eval")
        out[start:start + len(part)] = nn.sigmoid(z)
    return out.reshape(len(images), k)


def predict(params: nn.ModelParams, cfg: DetectorConfig, img: ImageBuffer, seeds: int | None = None,
            spec: DetectorSpec | None = None, bank: FilterBank | None = None) -> Prediction:
    bank = bank or default_filter_bank()
    spec = spec or detector_spec(cfg, bank)
    per_seed = predict_score_matrix(spec, params, cfg, [img], bank, seeds or cfg.eval_seeds)[0]
    score = float(per_seed.mean())
    return Prediction(score, label_for(score), tuple(float(s) for s in per_seed))


# ------------------------------------------------------------------ persistence


def config_to_flat(cfg: DetectorConfig) -> dict:
    s, a = cfg.smash, cfg.augment
    return {
        "patch_side": s.patch_side,
        "num_patches": s.num_patches,
        "patches_per_mosaic": s.patches_per_mosaic,
        "selection_mode": s.selection_mode,
        "jpeg_prob": a.jpeg_prob,
        "jpeg_qf_min": a.jpeg_qf_range[0],
        "jpeg_qf_max": a.jpeg_qf_range[1],
        "blur_prob": a.blur_prob,
        "blur_sigma_min": a.blur_sigma_range[0],
        "blur_sigma_max": a.blur_sigma_range[1],
        "downsample_prob": a.downsample_prob,
        "downsample_ratio_min": a.downsample_ratio_range[0],
        "downsample_ratio_max": a.downsample_ratio_range[1],
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "ablation": cfg.ablation,
        "patience": cfg.patience,
        "val_fraction": cfg.val_fraction,
        "eval_seed": cfg.eval_seed,
        "eval_seeds": cfg.eval_seeds,
        "workers": cfg.workers,
    }


FLAT_TYPES = {k: type(v) for k, v in config_to_flat(DetectorConfig()).items()}


def config_from_flat(flat: dict) -> DetectorConfig:
    unknown = set(flat) - set(FLAT_TYPES)
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    base = config_to_flat(DetectorConfig())
    base.update(flat)
    v = {k: FLAT_TYPES[k](val) if not isinstance(val, FLAT_TYPES[k]) else val for k, val in base.items()}
    smash = SmashConfig(v["patch_side"], v["num_patches"], v["patches_per_mosaic"], v["eval_seed"],
                        v["selection_mode"])
    augment = AugmentPolicy(
        v["jpeg_prob"], (v["jpeg_qf_min"], v["jpeg_qf_max"]),
        v["blur_prob"], (v["blur_sigma_min"], v["blur_sigma_max"]),
        v["downsample_prob"], (v["downsample_ratio_min"], v["downsample_ratio_max"]),
        v["seed"],
    )
    return DetectorConfig(smash, augment, v["lr"], v["batch_size"], v["epochs"], v["seed"], v["ablation"],
                          v["patience"], v["val_fraction"], v["eval_seed"], v["eval_seeds"], v["workers"])


def config_sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_detector(path, params: nn.ModelParams, cfg: DetectorConfig) -> None:
    """Write the binary checkpoint plus a ``.json`` sidecar with the config."""
    nn.save_checkpoint(path, params)
    config_sidecar(path).write_text(json.dumps(config_to_flat(cfg), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")


def load_detector(path, cfg: DetectorConfig | None = None):
    params = nn.load_checkpoint(path)
    if cfg is None:
        side = config_sidecar(path)
        cfg = config_from_flat(json.loads(side.read_text(encoding="utf-8"))) if side.exists() else DetectorConfig()
    return params, cfg


def with_ablation(cfg: DetectorConfig, ablation: str) -> DetectorConfig:
    return replace(cfg, ablation=ablation)


def with_patch_side(cfg: DetectorConfig, patch_side: int) -> DetectorConfig:
    smash = SmashConfig.for_patch_side(patch_side, cfg.smash.mosaic_side, seed=cfg.smash.seed)
    return replace(cfg, smash=smash)

