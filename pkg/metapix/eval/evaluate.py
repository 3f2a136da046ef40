from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from metapix.autodiff import no_grad
from metapix.data.loader import Dataset
from metapix.eval.metrics import Confusion, accumulate, miou
from metapix.nn.segnet import SegNet, seg_forward
from metapix.schemas import IGNORE_ID


@dataclass
class Evaluation:
    confusion: Confusion
    per_class_iou: List[Optional[float]]
    miou: float


def predict(seg: SegNet, image, domain: str = "target") -> np.ndarray:
    """Argmax labels [B, H, W]; nothing is recorded."""
    with no_grad():
        logits = seg_forward(seg, image, domain)
    return logits.values.argmax(axis=1)


def evaluate_split(seg: SegNet, dataset: Dataset, split: str = "target_val", domain: str = "target",
                   ignore_id: int = IGNORE_ID) -> Evaluation:
    conf = Confusion(seg.num_classes)
    for index in range(dataset.size(split)):
        batch = dataset.load_batch(split, [index])
        conf = accumulate(conf, predict(seg, batch.image, domain), batch.label, ignore_id)
    per_class, mean = miou(conf)
    return Evaluation(conf, per_class, mean)
