"""Confusion matrices, OA/AA/kappa and classification-map rendering."""

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions (classes 1..C at index 0..C-1)."""

    counts: np.ndarray

    @classmethod
    def empty(cls, n_classes):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise MetricsError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(truth, pred, n_classes):
    """Count (truth, prediction) pairs over pixels whose truth is labeled (!= 0)."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise MetricsError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    keep = truth != 0
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() > n_classes):
        raise MetricsError(f"truth class {int(t.max())} outside 1..{n_classes}")
    if p.size and (p.min() < 1 or p.max() > n_classes):
        bad = int(p.min()) if p.min() < 1 else int(p.max())
        raise MetricsError(f"prediction class {bad} outside 1..{n_classes}")
    return ConfusionMatrix(_kernels.confusion_counts(t - 1, p - 1, n_classes))


@dataclass(frozen=True)
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray  # NaN where the class has no ground-truth pixels

    def as_dict(self):
        return {
            "OA": self.oa,
            "AA": self.aa,
            "kappa": self.kappa,
            "per_class": [None if np.isnan(a) else float(a) for a in self.per_class],
        }

    def report(self):
        lines = [f"class_{c + 1}={'nan' if np.isnan(a) else f'{a:.4f}'}" for c, a in enumerate(self.per_class)]
        lines += [f"OA={self.oa:.4f}", f"AA={self.aa:.4f}", f"kappa={self.kappa:.4f}"]
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def metrics(cm):
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise MetricsError("no labeled pixels in the confusion matrix")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    oa = diag.sum() / total
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, diag / rows, np.nan)
    aa = float(np.nanmean(per_class))
    pe = float((rows * cols).sum() / total**2)
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return Metrics(float(oa), aa, float(kappa), per_class)


DEFAULT_PALETTE = (
    (0, 0, 0),
    (0, 130, 0),
    (0, 0, 230),
    (230, 0, 0),
    (240, 200, 0),
    (140, 70, 200),
    (0, 200, 200),
    (230, 120, 0),
    (160, 160, 160),
    (120, 60, 20),
    (255, 120, 200),
    (100, 255, 100),
    (80, 80, 160),
    (200, 255, 255),
    (128, 128, 0),
    (255, 255, 255),
)


def render_map(prediction, palette=DEFAULT_PALETTE):
    """Binary PPM (P6) bytes; entry 0 of the palette is the unlabeled background."""
    pred = np.asarray(prediction)
    pal = np.asarray(palette, dtype=np.uint8)
    if pal.ndim != 2 or pal.shape[1] != 3:
        raise MetricsError("palette must be a list of RGB triples")
    if pred.size and int(pred.max()) >= len(pal):
        raise MetricsError(f"class {int(pred.max())} has no palette entry")
    h, w = pred.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + pal[pred.astype(np.int64)].tobytes()
