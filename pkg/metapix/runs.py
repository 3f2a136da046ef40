"""
Run directories.

Layout of one run::

    <run_root>/<UTC timestamp>-<command>/
        config.json          resolved configuration, written before anything runs
        metrics.jsonl        one JSON record per training step or evaluation
        checkpoints/step_NNNNNNNN.ckpt
        summary.csv          final per-class IoU and mIoU
        run.log
"""

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Union

from loguru import logger
from pydantic import BaseModel

from metapix.core.config import get_settings
from metapix.core.errors import CheckpointError, ConfigError
from metapix.eval.metrics import write_iou_csv
from metapix.schemas import EvalRecord, RunConfig, StepRecord

CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"
SUMMARY_NAME = "summary.csv"
CHECKPOINT_DIR = "checkpoints"


class RunDirectory:
    def __init__(self, path: Path):
        self.path = Path(path)

    @classmethod
    def create(cls, command: str, root: Optional[Path] = None) -> "RunDirectory":
        root = Path(root) if root is not None else get_settings().RUN_ROOT
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        path = root / f"{stamp}-{command}"
        suffix = 1
        while path.exists():
            path = root / f"{stamp}-{command}-{suffix}"
            suffix += 1
        path.mkdir(parents=True)
        (path / CHECKPOINT_DIR).mkdir()
        logger.info(f"Run directory: {path}")
        return cls(path)

    @classmethod
    def open(cls, path: Path) -> "RunDirectory":
        path = Path(path)
        if not (path / CONFIG_NAME).exists():
            raise ConfigError(f"{path} is not a run directory (no {CONFIG_NAME})", details={"path": str(path)})
        return cls(path)

    def child(self, name: str) -> "RunDirectory":
        path = self.path / name
        (path / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
        return RunDirectory(path)

    @property
    def metrics_path(self) -> Path:
        return self.path / METRICS_NAME

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / CHECKPOINT_DIR

    def write_config(self, config: RunConfig) -> Path:
        path = self.path / CONFIG_NAME
        path.write_text(config.echo(), encoding="utf-8")
        return path

    def read_config(self) -> RunConfig:
        return RunConfig.model_validate_json((self.path / CONFIG_NAME).read_text(encoding="utf-8"))

    def append_metrics(self, record: BaseModel) -> None:
        kind = "eval" if isinstance(record, EvalRecord) else "step"
        line = json.dumps({"kind": kind, **record.model_dump()}, sort_keys=True)
        with open(self.metrics_path, "a", encoding="utf-8") as handle:
            handle.write(line + "\n")

    def read_metrics(self) -> List[Union[StepRecord, EvalRecord]]:
        if not self.metrics_path.exists():
            return []
        records: List[Union[StepRecord, EvalRecord]] = []
        for line in self.metrics_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            data = json.loads(line)
            kind = data.pop("kind", "step")
            records.append(EvalRecord(**data) if kind == "eval" else StepRecord(**data))
        return records

    def evaluations(self) -> List[EvalRecord]:
        return [r for r in self.read_metrics() if isinstance(r, EvalRecord)]

    def truncate_metrics(self, keep: int) -> None:
        """Keep only the first ``keep`` records, those written before a resume point."""
        if not self.metrics_path.exists():
            return
        lines = [line for line in self.metrics_path.read_text(encoding="utf-8").splitlines() if line.strip()]
        self.metrics_path.write_text("".join(line + "\n" for line in lines[:keep]), encoding="utf-8")

    def checkpoint_path(self, step: int) -> Path:
        return self.checkpoint_dir / f"step_{step:08d}.ckpt"

    def checkpoints(self) -> List[Path]:
        if not self.checkpoint_dir.exists():
            return []
        return sorted(self.checkpoint_dir.glob("step_*.ckpt"))

    def latest_checkpoint(self) -> Path:
        found = self.checkpoints()
        if not found:
            raise CheckpointError(f"No checkpoints in {self.checkpoint_dir}", details={"path": str(self.path)})
        return found[-1]

    def write_summary(self, per_class: List[Optional[float]], mean: float) -> Path:
        return write_iou_csv(self.path / SUMMARY_NAME, per_class, mean)
