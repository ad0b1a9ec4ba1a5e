"""Quantitative analyses: top-k accuracy, entropy, invariance maps, mIoU.

Conventions that tests rely on:

* top-k ties break toward the lower class index;
* entropies are in nats with 0*ln(0) = 0;
* cross-entropy is taken against the true label, -ln p(true), with the
  probability floored at 1e-12;
* mIoU accumulates intersections and unions over the whole dataset and
  averages over classes with a non-empty union;
* boundary-band distances are Euclidean, from an exact distance
  transform of the 4-neighbor class-boundary pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import InvalidParameterError, ShapeError
from .imaging import Image, resize_array
from .net import Model, forward_features

__all__ = [
    "topk_hit",
    "topk_accuracy",
    "mean_entropy",
    "mean_true_cross_entropy",
    "binarize_activations",
    "InvarianceMap",
    "hamming_invariance_map",
    "MiouAccumulator",
    "miou",
    "boundary_pixels",
    "boundary_band",
    "boundary_miou",
]

_PROB_FLOOR = 1e-12


def topk_hit(probs: np.ndarray, label: int, k: int) -> bool:
    """True if ``label`` is among the k most probable classes.

    Ties are broken toward the lower class index, so the result is
    deterministic for quantized probability vectors.
    """
    probs = np.asarray(probs)
    if not 1 <= k <= probs.shape[-1]:
        raise InvalidParameterError(f"k={k} out of range for {probs.shape[-1]} classes")
    order = np.lexsort((np.arange(probs.shape[-1]), -probs))
    return int(label) in order[:k]


def topk_accuracy(preds, labels, k: int) -> float:
    """Fraction of examples whose true label is in the top k."""
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise InvalidParameterError("preds and labels must have equal length")
    if not preds:
        raise InvalidParameterError("need at least one prediction")
    hits = sum(topk_hit(p, y, k) for p, y in zip(preds, labels))
    return hits / len(preds)


def mean_entropy(preds) -> float:
    """Mean of -sum p ln p over examples, in nats."""
    total = 0.0
    count = 0
    for p in preds:
        p = np.asarray(p, dtype=np.float64)
        pos = p[p > 0.0]
        total += float(-(pos * np.log(pos)).sum())
        count += 1
    if count == 0:
        raise InvalidParameterError("need at least one prediction")
    return total / count


def mean_true_cross_entropy(preds, labels) -> float:
    """Mean of -ln p(true label), probabilities floored at 1e-12."""
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels) or not preds:
        raise InvalidParameterError("need equal-length, non-empty preds and labels")
    total = 0.0
    for p, y in zip(preds, labels):
        total += -np.log(max(float(np.asarray(p)[int(y)]), _PROB_FLOOR))
    return total / len(preds)


def binarize_activations(tap: np.ndarray) -> np.ndarray:
    """Per-channel indicator of a strictly positive response."""
    return np.asarray(tap) > 0.0


@dataclass(frozen=True)
class InvarianceMap:
    """Per-tap grids of normalized Hamming distances in [0, 1]."""

    tap_names: tuple[str, ...]
    maps: dict  # tap name -> (h, w) float array at the tap's own resolution

    def tap_means(self) -> dict:
        return {name: float(self.maps[name].mean()) for name in self.tap_names}

    def resampled(self) -> dict:
        """All maps bilinearly resized to the largest tap's resolution."""
        big_h = max(self.maps[n].shape[0] for n in self.tap_names)
        big_w = max(self.maps[n].shape[1] for n in self.tap_names)
        out = {}
        for name in self.tap_names:
            m = self.maps[name]
            out[name] = resize_array(m[:, :, None], big_h, big_w)[:, :, 0]
        return out


def hamming_invariance_map(model: Model, sharp: Image, blurred: Image) -> InvarianceMap:
    """Fraction of binarized channels that differ between two forward passes.

    Computed at every pooling tap, normalized by channel count, at the
    tap's own spatial resolution.
    """
    if (sharp.height, sharp.width) != (blurred.height, blurred.width):
        raise ShapeError(
            f"image extents differ: {sharp.height}x{sharp.width} vs "
            f"{blurred.height}x{blurred.width}"
        )
    taps_a = forward_features(model, sharp)
    taps_b = forward_features(model, blurred)
    names = model.architecture.tap_names
    maps = {}
    for name in names:
        bits_a = binarize_activations(taps_a[name][0])
        bits_b = binarize_activations(taps_b[name][0])
        maps[name] = (bits_a != bits_b).mean(axis=0)
    return InvarianceMap(tap_names=names, maps=maps)


class MiouAccumulator:
    """Dataset-level IoU accumulation (whole-set convention)."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise InvalidParameterError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.intersections = np.zeros(num_classes, dtype=np.int64)
        self.unions = np.zeros(num_classes, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray, where: np.ndarray | None = None) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"mask extents differ: {pred.shape} vs {gt.shape}")
        if where is not None:
            pred = pred[where]
            gt = gt[where]
        for c in range(self.num_classes):
            p = pred == c
            g = gt == c
            self.intersections[c] += int(np.count_nonzero(p & g))
            self.unions[c] += int(np.count_nonzero(p | g))

    def value(self) -> float | None:
        present = self.unions > 0
        if not present.any():
            return None
        ious = self.intersections[present] / self.unions[present]
        return float(ious.mean())


def miou(preds, gts, num_classes: int) -> float | None:
    """mIoU over a dataset; classes with empty union are excluded."""
    acc = MiouAccumulator(num_classes)
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc.value()


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbor of a different class."""
    mask = np.asarray(mask)
    b = np.zeros(mask.shape, dtype=bool)
    diff = mask[:-1, :] != mask[1:, :]
    b[:-1, :] |= diff
    b[1:, :] |= diff
    diff = mask[:, :-1] != mask[:, 1:]
    b[:, :-1] |= diff
    b[:, 1:] |= diff
    return b


def boundary_band(mask: np.ndarray, distance: float) -> np.ndarray:
    """Pixels within Euclidean ``distance`` of any class-boundary pixel."""
    if distance < 0:
        raise InvalidParameterError(f"distance must be >= 0, got {distance}")
    boundary = boundary_pixels(mask)
    if not boundary.any():
        return np.zeros(mask.shape, dtype=bool)
    dist = distance_transform_edt(~boundary)
    return dist <= distance


def boundary_miou(preds, gts, num_classes: int, distance: float = 4.0) -> float | None:
    """mIoU restricted to each ground truth's boundary band.

    Returns None when no ground-truth mask has any class boundary (the
    restriction is empty, so the metric is undefined).
    """
    acc = MiouAccumulator(num_classes)
    any_band = False
    for p, g in zip(preds, gts):
        band = boundary_band(np.asarray(g), distance)
        if not band.any():
            continue
        any_band = True
        acc.add(p, g, where=band)
    if not any_band:
        return None
    return acc.value()
