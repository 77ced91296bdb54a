"""Deterministic synthetic datasets and task losses for desk-scale runs.

Classification images carry one of `classes` fixed oriented sinusoidal bar
prototypes (class-dependent frequency and orientation) under seeded additive
noise, so a linear probe on raw pixels recovers the class. Segmentation
images composite `classes - 1` randomly placed colored shapes over a gray
background with exact per-pixel labels.

Splits are disjoint by construction: each split draws from an independent
seeded stream derived from (seed, split).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigurationError, Tensor, autograd_op, reshape, transpose_last2

_SPLIT_TAGS = {"train": 0, "val": 1}


@dataclass
class ToyDataset:
    kind: str
    images: np.ndarray  # N×C×H×W float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 for classification, (N,H,W) int64 for segmentation
    classes: int
    split: str
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]


def _split_rng(seed: int, split: str) -> np.random.Generator:
    if split not in _SPLIT_TAGS:
        raise ConfigurationError(f"unknown split {split!r}")
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_TAGS[split]]))


def _validate(hw: int, classes: int) -> None:
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if hw % 4 != 0:
        raise ConfigurationError(f"image size must be divisible by 4, got {hw}")
    if hw < 16:
        raise ConfigurationError(f"image size must be at least 16, got {hw}")


def make_classification(
    seed: int, count: int, hw: int, classes: int, noise: float = 0.1, split: str = "train"
) -> ToyDataset:
    """Oriented-bar prototypes, one per class, under seeded pixel noise."""
    _validate(hw, classes)
    rng = _split_rng(seed, split)
    coords = np.arange(hw, dtype=np.float64)
    ii, jj = np.meshgrid(coords, coords, indexing="ij")
    prototypes = []
    for k in range(classes):
        freq = 1.0 + k // 2
        angle = (k % 4) * math.pi / 4
        wave = np.sin(2 * math.pi * freq * (ii * math.cos(angle) + jj * math.sin(angle)) / hw)
        base = 0.5 + 0.35 * wave
        chans = np.stack([base * scale for scale in (1.0, 0.8, 0.6)])
        prototypes.append(chans)
    prototypes = np.stack(prototypes)  # K×3×H×W
    labels = np.arange(count, dtype=np.int64) % classes
    images = prototypes[labels] + rng.normal(0.0, noise, size=(count, 3, hw, hw))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return ToyDataset("classification", images, labels, classes, split, seed)


_PALETTE = [
    (0.85, 0.25, 0.2),
    (0.2, 0.35, 0.85),
    (0.2, 0.75, 0.3),
    (0.85, 0.75, 0.2),
    (0.7, 0.25, 0.8),
]


def make_segmentation(
    seed: int, count: int, hw: int, classes: int, noise: float = 0.05, split: str = "train"
) -> ToyDataset:
    """Composite `classes - 1` colored shapes on gray; labels exact by construction."""
    _validate(hw, classes)
    if classes - 1 > len(_PALETTE):
        raise ConfigurationError(f"at most {len(_PALETTE) + 1} segmentation classes supported")
    rng = _split_rng(seed, split)
    coords = np.arange(hw, dtype=np.float64)
    ii, jj = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((count, 3, hw, hw), dtype=np.float64)
    labels = np.zeros((count, hw, hw), dtype=np.int64)
    for idx in range(count):
        img = np.full((3, hw, hw), 0.25)
        lbl = np.zeros((hw, hw), dtype=np.int64)
        for cls in range(1, classes):
            cy, cx = rng.uniform(hw * 0.25, hw * 0.75, size=2)
            extent = rng.uniform(hw * 0.12, hw * 0.22)
            if cls % 2 == 1:  # disc
                mask = (ii - cy) ** 2 + (jj - cx) ** 2 <= extent**2
            else:  # axis-aligned square
                mask = (np.abs(ii - cy) <= extent) & (np.abs(jj - cx) <= extent)
            color = _PALETTE[cls - 1]
            for c in range(3):
                img[c][mask] = color[c]
            lbl[mask] = cls
        images[idx] = img
        labels[idx] = lbl
    images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return ToyDataset("segmentation", images, labels, classes, split, seed)


def make_dataset(task: dict, split: str) -> ToyDataset:
    """Build a dataset from a task-config mapping (kind/hw/classes/counts/...)."""
    kind = task.get("kind", "segmentation")
    count = task["train_count"] if split == "train" else task["val_count"]
    maker = {"classification": make_classification, "segmentation": make_segmentation}
    if kind not in maker:
        raise ConfigurationError(f"unknown task kind {kind!r}")
    return maker[kind](
        seed=task.get("seed", 0),
        count=count,
        hw=task["hw"],
        classes=task["classes"],
        noise=task.get("noise", 0.05 if kind == "segmentation" else 0.1),
        split=split,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _softmax_cross_entropy(logits: Tensor, labels_flat: np.ndarray) -> Tensor:
    """Fused mean cross-entropy over (rows × classes) logits."""
    x = logits.data
    k = x.shape[-1]
    if labels_flat.min() < 0 or labels_flat.max() >= k:
        raise ValueError(
            f"label out of range: values span [{labels_flat.min()}, {labels_flat.max()}] "
            f"for {k} classes"
        )
    shifted = x - x.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    count = labels_flat.shape[0]
    picked = shifted[np.arange(count), labels_flat]
    lse = np.log(exp.sum(axis=-1))
    loss = np.asarray((lse - picked).mean(), dtype=x.dtype)

    def backward(g: np.ndarray):
        grad = probs.copy()
        grad[np.arange(count), labels_flat] -= 1.0
        return (g * grad / count,)

    return autograd_op(loss, (logits,), backward)


def cross_entropy(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of N×K logits against integer labels (softmax internal)."""
    if pred.ndim != 2:
        raise ValueError(f"expected N×K logits, got shape {pred.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != pred.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {pred.shape[0]} predictions")
    return _softmax_cross_entropy(pred, labels)


def pixel_cross_entropy(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of N×K×H×W logits against N×H×W labels."""
    if pred.ndim != 4:
        raise ValueError(f"expected N×K×H×W logits, got shape {pred.shape}")
    n, k, h, w = pred.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {pred.shape}")
    # N×K×H×W -> (N·H·W)×K rows
    rows = reshape(transpose_last2(reshape(pred, (n, k, h * w))), (n * h * w, k))
    return _softmax_cross_entropy(rows, labels.reshape(-1))


def task_loss(pred: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    if kind == "classification":
        return cross_entropy(pred, labels)
    return pixel_cross_entropy(pred, labels)


# ---------------------------------------------------------------------------
# Metrics and dumps
# ---------------------------------------------------------------------------


def classification_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def pixel_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def mean_iou(logits: np.ndarray, labels: np.ndarray, classes: int) -> float:
    pred = logits.argmax(axis=1)
    ious = []
    for c in range(classes):
        inter = np.logical_and(pred == c, labels == c).sum()
        union = np.logical_or(pred == c, labels == c).sum()
        if union > 0:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else 0.0


def dump_dataset(ds: ToyDataset, directory: str | Path) -> Path:
    """Write raw tensors plus a manifest for offline inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", ds.images)
    np.save(directory / "labels.npy", ds.labels)
    manifest = {
        "kind": ds.kind,
        "classes": ds.classes,
        "split": ds.split,
        "seed": ds.seed,
        "count": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "files": ["images.npy", "labels.npy"],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory
