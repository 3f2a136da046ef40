"""
Weight-map images and weight statistics against the generator's corruption masks.

Maps are stored as 8-bit grayscale with pixel = floor(255 * w + 0.5), so
brighter means a higher weight.
"""

from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from loguru import logger
from PIL import Image

from metapix.core.errors import DataError, ShapeError
from metapix.autodiff import Tensor, no_grad
from metapix.data.loader import Dataset
from metapix.losses import one_hot
from metapix.nn.weightnet import WeightNet, weight_forward
from metapix.schemas import IGNORE_ID


def select_weights(weights: np.ndarray, label: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-pixel applied weight [B, H, W]: the single plane, or for per-class maps
    the ground-truth channel (channel 0 without a label or at ignored pixels).
    """
    if weights.shape[1] == 1 or label is None:
        return weights[:, 0]
    channels = weights.shape[1]
    index = np.where((label >= 0) & (label < channels), label, 0)
    return np.take_along_axis(weights, index[:, None], axis=1)[:, 0]


def weight_stats(weights: np.ndarray, label: np.ndarray, ignore_id: int = IGNORE_ID) -> Dict[str, float]:
    """Mean, min and max applied weight over the labelled pixels (the ones the loss counts)."""
    label = np.asarray(label)
    applied = select_weights(np.asarray(weights, dtype=np.float64), label)[label != ignore_id]
    if applied.size == 0:
        return {}
    return {"w_mean": float(applied.mean()), "w_min": float(applied.min()), "w_max": float(applied.max())}


def quantize_weights(plane: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(plane, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_weight_map(weights: Union[Tensor, np.ndarray], path: Path,
                      label: Optional[np.ndarray] = None) -> Path:
    values = weights.values if isinstance(weights, Tensor) else np.asarray(weights)
    if values.ndim != 4 or values.shape[0] != 1:
        raise ShapeError("export_weight_map expects a map shaped [1, m, H, W]", details={"shape": list(values.shape)})
    if label is not None:
        label = np.asarray(label).reshape((1,) + values.shape[2:])
    plane = quantize_weights(select_weights(values, label)[0])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(plane).convert("L").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"Could not write weight map {path}: {exc}", details={"path": str(path)}) from exc
    return path


def read_weight_map(path: Path) -> np.ndarray:
    with Image.open(path) as handle:
        return np.array(handle.convert("L")).astype(np.float64) / 255.0


def weight_separation(wnet: WeightNet, dataset: Dataset, limit: int = 50,
                      ignore_id: int = IGNORE_ID) -> Optional[Dict[str, Optional[float]]]:
    """
    Mean applied weight over corrupted and over clean source pixels, across the
    first ``limit`` source images. None when the dataset carries no masks.
    """
    corrupt_sum = clean_sum = 0.0
    corrupt_count = clean_count = 0
    for index in range(min(limit, dataset.size("source"))):
        mask = dataset.read_mask("source", index)
        if mask is None:
            continue
        batch = dataset.load_batch("source", [index])
        with no_grad():
            weights = weight_forward(wnet, batch.image, one_hot(batch.label, wnet.num_classes, ignore_id))
        applied = select_weights(weights.values.astype(np.float64), batch.label)[0]
        valid = batch.label[0] != ignore_id
        corrupt_sum += float(applied[mask & valid].sum())
        corrupt_count += int((mask & valid).sum())
        clean_sum += float(applied[~mask & valid].sum())
        clean_count += int((~mask & valid).sum())

    if corrupt_count == 0 and clean_count == 0:
        return None
    corrupt_mean = corrupt_sum / corrupt_count if corrupt_count else None
    clean_mean = clean_sum / clean_count if clean_count else None
    ratio = corrupt_mean / clean_mean if corrupt_mean is not None and clean_mean else None
    stats = {"w_corrupt_mean": corrupt_mean, "w_clean_mean": clean_mean, "ratio": ratio}
    logger.bind(payload=stats).debug("Weight separation measured")
    return stats
