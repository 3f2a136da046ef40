from metapix.eval.evaluate import Evaluation, evaluate_split, predict
from metapix.eval.metrics import Confusion, accumulate, format_iou_csv, miou, write_iou_csv
from metapix.eval.weight_maps import (
    export_weight_map,
    quantize_weights,
    read_weight_map,
    select_weights,
    weight_stats,
    weight_separation,
)

__all__ = [
    "Confusion",
    "Evaluation",
    "accumulate",
    "evaluate_split",
    "export_weight_map",
    "format_iou_csv",
    "miou",
    "predict",
    "quantize_weights",
    "read_weight_map",
    "select_weights",
    "weight_stats",
    "weight_separation",
    "write_iou_csv",
]
