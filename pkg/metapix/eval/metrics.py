"""Confusion matrices and intersection-over-union."""

import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from loguru import logger

from metapix.core.errors import DataError, ShapeError
from metapix.schemas import IGNORE_ID


class Confusion:
    """C x C pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, matrix: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64) if matrix is None else matrix

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.num_classes, self.matrix + other.matrix)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def accumulate(conf: Confusion, pred: np.ndarray, truth: np.ndarray, ignore_id: int = IGNORE_ID) -> Confusion:
    """A new confusion with the counts of one prediction added; ignored truths are skipped."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError(
            "Prediction and ground truth differ in shape",
            details={"pred": list(pred.shape), "truth": list(truth.shape)},
        )
    c = conf.num_classes
    keep = truth != ignore_id
    pred, truth = pred[keep], truth[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= c or truth.min() < 0 or truth.max() >= c):
        raise DataError(f"Class ids must lie in [0, {c}) or be the ignore id", details={"num_classes": c})
    counts = np.bincount(c * truth + pred, minlength=c * c).reshape(c, c)
    return Confusion(c, conf.matrix + counts)


def miou(conf: Confusion) -> Tuple[List[Optional[float]], float]:
    """
    Per-class IoU and their mean. Classes with an empty union (absent from both
    truth and prediction) are reported as None and left out of the mean; if every
    class is absent the mean is NaN.
    """
    m = conf.matrix.astype(np.float64)
    intersection = np.diag(m)
    union = m.sum(axis=1) + m.sum(axis=0) - intersection
    per_class: List[Optional[float]] = [
        float(i / u) if u > 0 else None for i, u in zip(intersection, union)
    ]
    present = [v for v in per_class if v is not None]
    absent = [c for c, v in enumerate(per_class) if v is None]
    if absent:
        logger.bind(payload={"absent_classes": absent}).info("Classes absent from evaluation, excluded from mIoU")
    if not present:
        logger.warning("Every class absent; mIoU is undefined")
        return per_class, math.nan
    return per_class, float(np.mean(present))


def format_iou_csv(per_class: List[Optional[float]], mean: float) -> str:
    lines = ["class,iou"]
    for c, value in enumerate(per_class):
        lines.append(f"{c},{'absent' if value is None else f'{value:.6f}'}")
    lines.append(f"miou,{mean:.6f}")
    return "\n".join(lines) + "\n"


def write_iou_csv(path: Path, per_class: List[Optional[float]], mean: float) -> Path:
    path = Path(path)
    path.write_text(format_iou_csv(per_class, mean), encoding="utf-8")
    return path
