"""
Per-pixel cross-entropy, plain and pixel-weighted.

The weighted loss is ``sum(w_hat * CE) / (B * H * W)``. The divisor is always
the full pixel count, never the sum of the weights, so the overall scale of the
weight map stays meaningful. With a single-channel map, ``w_hat`` is that map.
With a per-class map it is the map's value at the ground-truth channel.
Ignored pixels contribute zero.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from metapix.core.errors import DataError, LossError, ShapeError
from metapix.autodiff import Tensor, constant, get_default_dtype, ops
from metapix.schemas import IGNORE_ID

LabelLike = Union[Tensor, np.ndarray]


@dataclass
class LossValue:
    value: Tensor
    valid_pixel_count: int

    def item(self) -> float:
        return self.value.item()


def _label_array(label: LabelLike) -> np.ndarray:
    values = label.values if isinstance(label, Tensor) else np.asarray(label)
    return values.astype(np.int64, copy=False)


def validate_labels(label: np.ndarray, num_classes: int, ignore_id: int = IGNORE_ID) -> None:
    """Reject any id outside [0, C) that is not the ignore id, naming the first offending pixel."""
    bad = ((label < 0) | (label >= num_classes)) & (label != ignore_id)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(
            f"Label value {int(label[where])} at pixel {where} is outside [0, {num_classes}) "
            f"and is not the ignore id {ignore_id}",
            details={"pixel": list(where), "value": int(label[where]), "num_classes": num_classes},
        )


def one_hot(label: LabelLike, num_classes: int, ignore_id: int = IGNORE_ID) -> Tensor:
    """[B, H, W] class ids to [B, C, H, W] planes; ignored pixels are all-zero."""
    label = _label_array(label)
    if label.ndim != 3:
        raise ShapeError("one_hot expects labels shaped [B, H, W]", details={"shape": list(label.shape)})
    validate_labels(label, num_classes, ignore_id)
    planes = np.arange(num_classes)[None, :, None, None] == label[:, None]
    return constant(planes.astype(get_default_dtype()))


def pixel_ce(logits: Tensor, label: LabelLike, weights: Optional[Tensor] = None,
             ignore_id: int = IGNORE_ID) -> LossValue:
    label = _label_array(label)
    if logits.ndim != 4:
        raise ShapeError("pixel_ce expects logits shaped [B, C, H, W]", details={"shape": list(logits.shape)})
    batch, channels, height, width = logits.shape
    if label.shape != (batch, height, width):
        raise ShapeError(
            "Label shape does not match logits",
            details={"logits": list(logits.shape), "label": list(label.shape)},
        )
    if weights is not None:
        if (weights.ndim != 4 or weights.shape[1] not in (1, channels)
                or weights.shape[0] != batch or weights.shape[2:] != (height, width)):
            raise ShapeError(
                f"Weight map must be [B, 1 or {channels}, H, W] matching the logits",
                details={"logits": list(logits.shape), "weights": list(weights.shape)},
            )
    validate_labels(label, channels, ignore_id)

    valid = label != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise LossError("empty loss", details={"shape": list(label.shape), "ignore_id": ignore_id})
    index = np.where(valid, label, -1)

    ce = ops.neg(ops.gather(ops.log_softmax(logits), index))
    if weights is not None:
        w_hat = weights if weights.shape[1] == 1 else ops.gather(weights, index)
        ce = ops.mul(w_hat, ce)
    return LossValue(ops.scale(ops.sum(ce), 1.0 / (batch * height * width)), count)


def joint_loss(loss_s: LossValue, loss_t: LossValue) -> LossValue:
    return LossValue(ops.add(loss_s.value, loss_t.value), loss_s.valid_pixel_count + loss_t.valid_pixel_count)
