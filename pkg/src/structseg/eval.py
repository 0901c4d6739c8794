"""Segmentation metrics: confusion-matrix IoU, boundary F1 and image occupancy."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .edge import label_to_boundary


@dataclass
class MetricsReport:
    iou: np.ndarray                  # per class, NaN where excluded
    miou: float
    confusion: np.ndarray
    iop: np.ndarray | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f1: np.ndarray | None = None
    boundary_f1: float | None = None
    pixels: np.ndarray = field(default=None)

    def to_csv(self) -> str:
        return metrics_to_csv(self)


def _as_list(maps):
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return [np.asarray(m) for m in maps]


def _check_pair(pred, truth, num_classes, index):
    if pred.shape != truth.shape:
        raise ValueError(f"pair {index}: prediction shape {pred.shape} != truth shape {truth.shape}")
    for name, m in (("prediction", pred), ("truth", truth)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"pair {index}: {name} has labels outside 0..{num_classes - 1}")


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """Counts with rows indexed by ground truth and columns by prediction."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    truth = np.asarray(truth).ravel().astype(np.int64)
    counts = np.bincount(truth * num_classes + pred, minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes)


def miou(pred, truth, num_classes: int, include_absent: bool = False) -> MetricsReport:
    """Mean IoU over one or many label-map pairs with a single shared confusion matrix.

    Classes missing from both truth and prediction are left out of the mean
    unless ``include_absent`` is set, in which case they count as zero.
    """
    preds, truths = _as_list(pred), _as_list(truth)
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} ground-truth maps")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i, (p, t) in enumerate(zip(preds, truths)):
        _check_pair(p, t, num_classes, i)
        cm += confusion_matrix(p, t, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / union
    if include_absent:
        iou = np.where(union > 0, iou, 0.0)
    mean = float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else float("nan")
    return MetricsReport(iou=iou, miou=mean, confusion=cm, pixels=cm.sum(axis=1))


def boundary_map_scores(pred, truth, tolerance: int = 2) -> np.ndarray:
    """Match counts between binary boundary stacks of shape (C, H, W).

    Returns ``[matched_pred, n_pred, matched_truth, n_truth]`` summed over
    channels; a pixel is matched when the other stack has a pixel of the
    same channel within Chebyshev distance ``tolerance``.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    size = (1,) * (pred.ndim - 2) + (2 * tolerance + 1,) * 2
    near_truth = ndimage.maximum_filter(truth, size=size, mode="constant")
    near_pred = ndimage.maximum_filter(pred, size=size, mode="constant")
    return np.array([(pred & near_truth).sum(), pred.sum(), (truth & near_pred).sum(), truth.sum()],
                    dtype=np.float64)


def boundary_f1(pred, truth, num_classes: int, tolerance: int = 2):
    """Per-class boundary precision, recall and F1 with a Chebyshev tolerance.

    Returns ``(precision, recall, f1, mean_f1)``; the mean runs over classes
    that have a boundary in the truth or the prediction.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    pb = label_to_boundary(pred, num_classes).astype(bool)
    tb = label_to_boundary(truth, num_classes).astype(bool)
    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    f1 = np.zeros(num_classes)
    scored = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        matched_pred, n_pred, matched_truth, n_truth = boundary_map_scores(pb[c], tb[c], tolerance)
        if n_pred == 0 and n_truth == 0:
            continue
        scored[c] = True
        precision[c] = matched_pred / n_pred if n_pred else 0.0
        recall[c] = matched_truth / n_truth if n_truth else 0.0
        total = precision[c] + recall[c]
        f1[c] = 2 * precision[c] * recall[c] / total if total > 0 else 0.0
    precision[~scored] = recall[~scored] = f1[~scored] = np.nan
    mean = float(np.nanmean(f1)) if scored.any() else float("nan")
    return precision, recall, f1, mean


def iop(labels, num_classes: int, include_background: bool = False) -> np.ndarray:
    """Image occupancy percentage per class, as a fraction.

    For class ``c`` this is its pixel count divided by the total pixel count
    of the images that contain ``c``. Absent classes (and the background,
    unless requested) are NaN.
    """
    maps = _as_list(labels)
    counts = np.zeros(num_classes)
    denom = np.zeros(num_classes)
    for m in maps:
        hist = np.bincount(m.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
        counts += hist
        denom += np.where(hist > 0, m.size, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = counts / denom
    out[denom == 0] = np.nan
    if not include_background:
        out[0] = np.nan
    return out


def evaluate(pred, truth, num_classes: int, tolerance: int = 2, include_absent: bool = False) -> MetricsReport:
    """mIoU plus IOP of the truth maps and mean boundary scores over all pairs."""
    report = miou(pred, truth, num_classes, include_absent)
    report.iop = iop(truth, num_classes)
    rows = [boundary_f1(p, t, num_classes, tolerance) for p, t in zip(_as_list(pred), _as_list(truth))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report.precision = np.nanmean([r[0] for r in rows], axis=0)
        report.recall = np.nanmean([r[1] for r in rows], axis=0)
        report.f1 = np.nanmean([r[2] for r in rows], axis=0)
        report.boundary_f1 = float(np.nanmean([r[3] for r in rows]))
    return report


CSV_COLUMNS = ("class", "iou", "iop", "precision", "recall", "f1", "pixels")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(round(float(v), 6))


def metrics_to_csv(report: MetricsReport) -> str:
    """Header ``class,iou,iop,precision,recall,f1,pixels``, one row per class, then ``mIoU,<value>``.

    Empty cells mark values that are undefined or were not computed.
    """
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    k = len(report.iou)
    for c in range(k):
        cells = [str(c)]
        for arr in (report.iou, report.iop, report.precision, report.recall, report.f1):
            cells.append("" if arr is None else _fmt(float(arr[c])))
        cells.append(_fmt(report.pixels[c]) if report.pixels is not None else "")
        buf.write(",".join(cells) + "\n")
    buf.write(f"mIoU,{_fmt(report.miou)}\n")
    return buf.getvalue()
