"""
Ablation sweeps.

``split``: joint training with the first k encoder blocks duplicated per
domain for k in (0, 1, 5), plus a target-only run, all trained for the same
number of segmentation steps as a full weighted run.

``weight-mode``: the full weighted schedule with a single-channel weight map
and with a per-class one.
"""

import json
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

from loguru import logger
from pydantic import BaseModel

from metapix.core.errors import ConfigError
from metapix.data.loader import Dataset
from metapix.meta.schedule import run_schedule
from metapix.runs import RunDirectory
from metapix.schemas import RunConfig

SWEEPS = ("split", "weight-mode")
SPLIT_POINTS = (0, 1, 5)


class AblationResult(BaseModel):
    variant: str
    mode: str
    split_at: int
    weight_mode: str
    miou: float
    per_class_iou: List[Optional[float]]
    w_corrupt_mean: Optional[float] = None
    w_clean_mean: Optional[float] = None


@dataclass
class Variant:
    name: str
    mode: str
    changes: Dict[str, Dict[str, Any]]


def variants(config: RunConfig, sweep: str) -> List[Variant]:
    if sweep == "split":
        steps = config.schedule.seg_steps
        found = [Variant(f"joint_k{k}", "pretrain", {"network": {"split_at": k}, "schedule": {"N1": steps}})
                 for k in SPLIT_POINTS]
        found.append(Variant("target_only", "target_only", {"schedule": {"N1": steps}}))
        return found
    if sweep == "weight-mode":
        return [Variant(f"metapix_{mode}", "metapix", {"network": {"weight_mode": mode}})
                for mode in ("single", "per_class")]
    raise ConfigError(f"Unknown sweep '{sweep}'", details={"sweep": sweep, "sweeps": list(SWEEPS)})


def _derive(config: RunConfig, changes: Dict[str, Dict[str, Any]]) -> RunConfig:
    data = config.model_dump()
    for section, values in changes.items():
        data[section].update(values)
    return RunConfig.model_validate(data)


def run_ablation(config: RunConfig, dataset: Dataset, sweep: str,
                 run: Optional[RunDirectory] = None) -> List[AblationResult]:
    results: List[AblationResult] = []
    for variant in variants(config, sweep):
        derived = _derive(config, variant.changes)
        child = run.child(variant.name) if run is not None else None
        if child is not None:
            child.write_config(derived)
        logger.info(f"Ablation variant {variant.name}")
        trainer = run_schedule(derived, dataset, mode=variant.mode, run=child)
        final = trainer.final_evaluation()
        results.append(AblationResult(
            variant=variant.name,
            mode=variant.mode,
            split_at=derived.network.split_at,
            weight_mode=derived.network.weight_mode,
            miou=final.miou,
            per_class_iou=final.per_class_iou,
            w_corrupt_mean=final.w_corrupt_mean,
            w_clean_mean=final.w_clean_mean,
        ))

    if run is not None:
        (run.path / "ablation.json").write_text(
            json.dumps([r.model_dump() for r in results], indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        lines = ["variant,miou"] + [f"{r.variant},{r.miou:.6f}" for r in results]
        (run.path / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.bind(payload={r.variant: r.miou for r in results}).info(f"Ablation '{sweep}' finished")
    return results
