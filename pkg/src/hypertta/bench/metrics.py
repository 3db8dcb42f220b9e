"""Overall accuracy, average (per-class) accuracy and Cohen's kappa."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..hsi import DataError


@dataclass
class Scores:
    oa: float
    aa: float
    kappa: float
    confusion: np.ndarray
    warnings: tuple[str, ...] = ()

    def as_percent(self) -> dict:
        return {"oa": 100 * self.oa, "aa": 100 * self.aa, "kappa": 100 * self.kappa}


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions; ids run 1..K."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"{y_pred.size} predictions for {y_true.size} evaluated pixels")
    for name, y in (("labels", y_true), ("predictions", y_pred)):
        if y.size and (y.min() < 1 or y.max() > num_classes):
            raise DataError(f"{name} must lie in 1..{num_classes}")
    flat = (y_true - 1) * num_classes + (y_pred - 1)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def scores_from_confusion(cm: np.ndarray) -> Scores:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    notes = []
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    present = rows > 0
    if not present.all():
        missing = (np.flatnonzero(~present) + 1).tolist()
        notes.append(f"classes {missing} have no evaluated pixels; excluded from AA")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    diag = np.diag(cm)
    oa = diag.sum() / total
    aa = float(np.mean(diag[present] / rows[present]))
    pe = float((rows * cols).sum()) / float(total) ** 2
    # pe == 1 forces a single shared class, i.e. perfect agreement
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return Scores(float(oa), aa, float(kappa), cm, tuple(notes))


def evaluate(predictions, labels, pixels=None, num_classes: int | None = None) -> Scores:
    """Score ``predictions`` against ``labels``.

    ``labels`` is either a 1-D array of true ids aligned with ``predictions``
    or a :class:`LabelMap`, in which case ``pixels`` (flat indices, e.g. the
    target side of a split) selects the evaluated pixels.
    """
    if hasattr(labels, "labels"):
        if pixels is None:
            raise DataError("evaluating against a label map needs the evaluated pixel list")
        num_classes = num_classes or labels.num_classes
        y_true = labels.labels.ravel()[np.asarray(pixels, dtype=np.int64)]
    else:
        y_true = np.asarray(labels)
        if num_classes is None:
            num_classes = int(max(y_true.max(initial=1), np.max(predictions, initial=1)))
    return scores_from_confusion(confusion_matrix(y_true, predictions, num_classes))
