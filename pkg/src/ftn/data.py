"""Synthetic shape-segmentation data and the mIoU metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError

# Base colours per class; class 0 is the background.
PALETTE = np.array([
    [0.15, 0.20, 0.25],
    [0.85, 0.30, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.85, 0.25],
    [0.80, 0.30, 0.85],
    [0.30, 0.85, 0.85],
    [0.95, 0.95, 0.95],
], dtype=np.float32)


@dataclass
class ToySegSample:
    image: np.ndarray   # [H, W, 3] in [0, 1]
    labels: np.ndarray  # [H, W] int64
    seed: int


def _disk_mask(size, rng, min_r, max_r):
    r = rng.uniform(min_r, max_r)
    cy, cx = rng.uniform(r, size - r, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rect_mask(size, rng, min_side, max_side):
    h, w = rng.integers(min_side, max_side + 1, size=2)
    y0 = rng.integers(0, size - h + 1)
    x0 = rng.integers(0, size - w + 1)
    m = np.zeros((size, size), dtype=bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def _bbox(mask):
    ys, xs = np.nonzero(mask)
    return ys.min(), ys.max(), xs.min(), xs.max()


def _boxes_overlap(a, b, margin=1):
    return not (a[1] + margin < b[0] or b[1] + margin < a[0] or a[3] + margin < b[2] or b[3] + margin < a[2])


def make_sample(seed: int, size: int = 32, num_classes: int = 2, shape: str = "disk",
                noise: float = 0.05) -> ToySegSample:
    """One image: a shape per foreground class on a background, colour keyed to class.

    Shapes never touch and none spans the image, so every class occupies a
    single connected region. With two classes the lone shape covers roughly
    a third to a half of the image, keeping the classes balanced.
    """
    if not 2 <= num_classes <= len(PALETTE):
        raise ParameterError(f"num_classes must be in [2, {len(PALETTE)}], got {num_classes}")
    if shape not in ("disk", "rect", "mixed"):
        raise ParameterError(f"unknown shape kind {shape!r}")
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.int64)
    if num_classes == 2:
        radii, sides = (0.32 * size, 0.42 * size), (size // 2, int(0.8 * size))
    else:
        radii, sides = (size / 8, size / 4), (max(3, size // 6), size // 2)
    boxes = []
    for cls in range(1, num_classes):
        for _ in range(50):
            kind = shape if shape != "mixed" else ("disk", "rect")[rng.integers(2)]
            if kind == "disk":
                mask = _disk_mask(size, rng, *radii)
            else:
                mask = _rect_mask(size, rng, *sides)
            box = _bbox(mask)
            if not any(_boxes_overlap(box, b) for b in boxes):
                boxes.append(box)
                labels[mask] = cls
                break
    palette = PALETTE[:num_classes] + rng.uniform(-0.08, 0.08, size=(num_classes, 3)).astype(np.float32)
    image = palette[labels] + rng.normal(0.0, noise, size=(size, size, 3)).astype(np.float32)
    return ToySegSample(np.clip(image, 0.0, 1.0).astype(np.float32), labels, seed)


def make_batch(seeds, size: int = 32, num_classes: int = 2, shape: str = "disk"):
    samples = [make_sample(int(s), size, num_classes, shape) for s in seeds]
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class t predicted as p."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise DataError(f"prediction and target sizes differ: {pred.size} vs {target.size}")
    if target.size and (target.min() < 0 or target.max() >= num_classes or pred.min() < 0
                        or pred.max() >= num_classes):
        raise DataError(f"labels outside [0, {num_classes})")
    return np.bincount(target * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def mean_iou(pred, target, num_classes: int) -> float:
    """Mean over classes of TP / (TP + FP + FN), skipping classes absent from both."""
    cm = confusion_matrix(pred, target, num_classes).astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return float("nan")
    return float((tp[present] / union[present]).mean())
