"""
Outer training schedule.

A run is a list of segments executed in order. In ``metapix`` mode:

    pretrain (N1 joint steps)                          -> evaluate
    for generation 1..G:
        meta (N2 weighting-network steps)
        weighted (N3 segmentation steps)               -> evaluate

``pretrain`` and ``target_only`` modes are a single N1-step segment.

Segmentation steps and meta steps draw batches from independent sampler
streams, so the batches seen by the segmentation network do not depend on
how many meta steps ran. The trainer's whole position (segment, offset,
optimizer moments, sampler states) goes into every checkpoint, which makes a
resumed run continue exactly where the interrupted one stopped.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from metapix.core.config import get_settings
from metapix.core.errors import CheckpointError, ConfigError
from metapix.autodiff import PRECISIONS, default_dtype
from metapix.data.loader import Batch, BatchSampler, Dataset
from metapix.eval.evaluate import evaluate_split
from metapix.eval.weight_maps import weight_separation
from metapix.meta.steps import StepResult, meta_step, pretrain_step, target_only_step, weighted_train_step
from metapix.nn.checkpoint import read_checkpoint, write_checkpoint
from metapix.nn.optim import Adam
from metapix.nn.segnet import SegNet, build_seg_net
from metapix.nn.weightnet import WeightNet, build_weight_net
from metapix.runs import RunDirectory
from metapix.schemas import EvalRecord, RunConfig, Schedule, StepRecord

MODES = ("metapix", "pretrain", "target_only")

# Sampler name -> (split, stream id)
SAMPLERS = {
    "seg_source": ("source", 11),
    "seg_target": ("target_train", 12),
    "meta_source": ("source", 21),
    "meta_target": ("target_train", 22),
}

WEIGHT_NET_SEED_OFFSET = 1000
LOG_EVERY = 100


@dataclass(frozen=True)
class Segment:
    phase: str
    steps: int
    generation: int
    evaluate_after: bool


def plan(schedule: Schedule, mode: str) -> List[Segment]:
    if mode not in MODES:
        raise ConfigError(f"Unknown training mode '{mode}'", details={"mode": mode, "modes": list(MODES)})
    if mode == "pretrain":
        return [Segment("pretrain", schedule.N1, 0, True)]
    if mode == "target_only":
        return [Segment("target_only", schedule.N1, 0, True)]
    segments = [Segment("pretrain", schedule.N1, 0, True)]
    for generation in range(1, schedule.G + 1):
        segments.append(Segment("meta", schedule.N2, generation, False))
        segments.append(Segment("weighted", schedule.N3, generation, True))
    return segments


def segmentation_horizon(schedule: Schedule, mode: str) -> int:
    """Number of segmentation-optimizer steps, the polynomial decay horizon."""
    return schedule.seg_steps if mode == "metapix" else schedule.N1


def resolve_data_dir(config: RunConfig) -> Path:
    return Path(config.data_dir) if config.data_dir is not None else get_settings().DATA_ROOT


class Trainer:
    """
    Runs the segment plan of one training mode.

    Attributes:
        seg (SegNet): segmentation network
        wnet (WeightNet): weighting network (untouched outside ``metapix`` mode)
        seg_opt, meta_opt (Adam): optimizers of the two networks
        step (int): global steps completed
        history (List[StepRecord]): step records of this process
        evaluations (List[EvalRecord]): evaluation records of this process
    """

    def __init__(self, config: RunConfig, dataset: Dataset, mode: str = "metapix",
                 run: Optional[RunDirectory] = None, seg: Optional[SegNet] = None,
                 wnet: Optional[WeightNet] = None):
        if dataset.num_classes != config.network.num_classes:
            raise ConfigError(
                f"Dataset has {dataset.num_classes} classes, network is configured for {config.network.num_classes}",
                details={"dataset": dataset.num_classes, "network": config.network.num_classes},
            )
        self.config = config
        self.dataset = dataset
        self.mode = mode
        self.run_dir = run
        self.segments = plan(config.schedule, mode)
        self.dtype = PRECISIONS[config.precision]

        net = config.network
        with default_dtype(self.dtype):
            self.seg = seg or build_seg_net(net.num_classes, net.split_at, net.seg_widths, seed=config.seed)
            self.wnet = wnet or build_weight_net(
                net.num_classes, net.weight_widths, net.weight_mode, seed=config.seed + WEIGHT_NET_SEED_OFFSET
            )
        schedule = config.schedule
        self.seg_opt = Adam(config.seg_optimizer, total_steps=segmentation_horizon(schedule, mode), name="seg")
        # beta is the meta learning rate; the rest of the meta optimizer comes from meta_optimizer
        meta_settings = config.meta_optimizer.model_copy(update={"lr": schedule.beta})
        self.meta_opt = Adam(meta_settings, total_steps=schedule.G * schedule.N2, name="meta")
        self.samplers: Dict[str, BatchSampler] = {
            name: BatchSampler(dataset.size(split), config.batch_size, config.seed, stream)
            for name, (split, stream) in SAMPLERS.items()
        }

        self.step = 0
        self.segment_index = 0
        self.offset = 0
        self.records_written = 0
        self.stopped = False
        self.last_checkpoint: Optional[Path] = None
        self.history: List[StepRecord] = []
        self.evaluations: List[EvalRecord] = []

    @property
    def total_steps(self) -> int:
        return sum(segment.steps for segment in self.segments)

    def _batch(self, sampler: str) -> Batch:
        split, _ = SAMPLERS[sampler]
        return self.dataset.load_batch(split, self.samplers[sampler].next())

    def _record(self, record) -> None:
        if isinstance(record, EvalRecord):
            self.evaluations.append(record)
        else:
            self.history.append(record)
        if self.run_dir is not None:
            self.run_dir.append_metrics(record)
        self.records_written += 1

    def _run_step(self, segment: Segment) -> StepResult:
        ignore_id = self.config.ignore_id
        if segment.phase == "pretrain":
            return pretrain_step(self.seg, self.seg_opt, self._batch("seg_source"), self._batch("seg_target"),
                                 ignore_id)
        if segment.phase == "target_only":
            return target_only_step(self.seg, self.seg_opt, self._batch("seg_target"), ignore_id)
        if segment.phase == "weighted":
            return weighted_train_step(self.seg, self.wnet, self.seg_opt, self._batch("seg_source"),
                                       self._batch("seg_target"), ignore_id)
        return meta_step(self.seg, self.wnet, self.meta_opt, self._batch("meta_source"),
                         self._batch("meta_target"), self.config.schedule.alpha, ignore_id)

    def _begin(self, segment: Segment) -> None:
        if segment.phase == "meta" and segment.generation > 1 and self.config.schedule.reset_meta_optimizer:
            self.meta_opt.reset()
        logger.info(f"Phase {segment.phase} (generation {segment.generation}): {segment.steps} steps")

    def evaluate(self, phase_end: str, generation: int) -> EvalRecord:
        result = evaluate_split(self.seg, self.dataset, "target_val", "target", self.config.ignore_id)
        record = EvalRecord(step=self.step, phase_end=phase_end, generation=generation,
                            per_class_iou=result.per_class_iou, miou=result.miou)
        if self.mode == "metapix" and generation > 0:
            stats = weight_separation(self.wnet, self.dataset, self.config.schedule.weight_eval_images,
                                      self.config.ignore_id)
            if stats is not None:
                record.w_corrupt_mean = stats["w_corrupt_mean"]
                record.w_clean_mean = stats["w_clean_mean"]
        logger.bind(payload=record.model_dump()).info(f"Evaluation after {phase_end}: mIoU {record.miou:.4f}")
        return record

    def _finish(self, segment: Segment) -> None:
        if segment.evaluate_after:
            phase_end = "generation" if segment.phase == "weighted" else segment.phase
            self._record(self.evaluate(phase_end, segment.generation))

    def run(self, stop_after: Optional[int] = None) -> "Trainer":
        """Run to the end of the plan, or until ``stop_after`` global steps are done."""
        every = self.config.schedule.checkpoint_every
        with default_dtype(self.dtype):
            while self.segment_index < len(self.segments):
                segment = self.segments[self.segment_index]
                if self.offset == 0:
                    self._begin(segment)
                while self.offset < segment.steps:
                    if stop_after is not None and self.step >= stop_after:
                        self.save_checkpoint()
                        self.stopped = True
                        logger.info(f"Stopped after {self.step} steps")
                        return self
                    result = self._run_step(segment)
                    self.offset += 1
                    self.step += 1
                    self._record(StepRecord(
                        step=self.step, phase=segment.phase, generation=segment.generation,
                        loss_s=result.loss_s, loss_t=result.loss_t, lr=result.lr,
                        w_mean=result.w_mean, w_min=result.w_min, w_max=result.w_max,
                        skipped=not result.applied,
                    ))
                    if self.step % LOG_EVERY == 0:
                        logger.info(f"step {self.step}/{self.total_steps} {segment.phase} "
                                    f"loss_s={result.loss_s} loss_t={result.loss_t}")
                    boundary = self.offset == segment.steps
                    if boundary:
                        self._finish(segment)
                    if boundary or self.step % every == 0:
                        self.save_checkpoint()
                if segment.steps == 0:
                    self._finish(segment)
                self.segment_index += 1
                self.offset = 0
        return self

    # Checkpoints

    def state(self):
        tensors = {}
        tensors.update({f"seg.{name}": values for name, values in self.seg.state_dict().items()})
        tensors.update({f"wnet.{name}": values for name, values in self.wnet.state_dict().items()})
        tensors.update(self.seg_opt.state_tensors("seg_opt"))
        tensors.update(self.meta_opt.state_tensors("meta_opt"))
        meta = {
            "mode": self.mode,
            "precision": self.config.precision,
            "step": self.step,
            "segment_index": self.segment_index,
            "offset": self.offset,
            "records": self.records_written,
            "seg_arch": self.seg.architecture(),
            "wnet_arch": self.wnet.architecture(),
            "seg_opt": self.seg_opt.state_meta(),
            "meta_opt": self.meta_opt.state_meta(),
            "samplers": {name: sampler.state() for name, sampler in self.samplers.items()},
        }
        return tensors, meta

    def save_checkpoint(self) -> Optional[Path]:
        if self.run_dir is None:
            return None
        tensors, meta = self.state()
        path = self.run_dir.checkpoint_path(self.step)
        try:
            write_checkpoint(path, tensors, meta)
        except CheckpointError as exc:
            last = str(self.last_checkpoint) if self.last_checkpoint else None
            raise CheckpointError(
                f"{exc.message}; last good checkpoint: {last}",
                details={**exc.details, "last_good": last},
            ) from exc
        self.last_checkpoint = path
        logger.bind(payload={"step": self.step, "path": str(path)}).debug("Checkpoint saved")
        return path

    def restore(self, tensors: Dict[str, np.ndarray], meta: dict) -> None:
        if meta.get("mode") != self.mode:
            raise CheckpointError(
                f"Checkpoint was written in mode {meta.get('mode')}, trainer runs {self.mode}",
                details={"checkpoint": meta.get("mode"), "trainer": self.mode},
            )
        if meta.get("seg_arch") != self.seg.architecture() or meta.get("wnet_arch") != self.wnet.architecture():
            raise CheckpointError("Checkpoint architecture differs from the configured networks",
                                  details={"seg": meta.get("seg_arch"), "wnet": meta.get("wnet_arch")})
        self.seg.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("seg.")})
        self.wnet.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("wnet.")})
        self.seg_opt.load_state("seg_opt", tensors, meta["seg_opt"])
        self.meta_opt.load_state("meta_opt", tensors, meta["meta_opt"])
        for name, sampler in self.samplers.items():
            sampler.load_state(meta["samplers"][name])
        self.step = int(meta["step"])
        self.segment_index = int(meta["segment_index"])
        self.offset = int(meta["offset"])
        self.records_written = int(meta["records"])

    def final_evaluation(self) -> EvalRecord:
        if self.evaluations:
            return self.evaluations[-1]
        if self.run_dir is not None:
            previous = self.run_dir.evaluations()
            if previous:
                return previous[-1]
        with default_dtype(self.dtype):
            return self.evaluate("final", self.segments[-1].generation)


def run_schedule(config: RunConfig, dataset: Dataset, *, mode: str = "metapix",
                 run: Optional[RunDirectory] = None, stop_after: Optional[int] = None,
                 seg: Optional[SegNet] = None, wnet: Optional[WeightNet] = None) -> Trainer:
    """Train from scratch; writes metrics, checkpoints and, when finished, the summary."""
    trainer = Trainer(config, dataset, mode=mode, run=run, seg=seg, wnet=wnet)
    logger.bind(payload={"mode": mode, "steps": trainer.total_steps}).info("Training started")
    trainer.run(stop_after=stop_after)
    _summarize(trainer)
    return trainer


def resume(run: RunDirectory, *, stop_after: Optional[int] = None, dataset: Optional[Dataset] = None) -> Trainer:
    """Continue a run from its latest checkpoint."""
    config = run.read_config()
    path = run.latest_checkpoint()
    tensors, meta = read_checkpoint(path)
    dataset = dataset or Dataset.open(resolve_data_dir(config), ignore_id=config.ignore_id)
    trainer = Trainer(config, dataset, mode=meta["mode"], run=run)
    trainer.restore(tensors, meta)
    trainer.last_checkpoint = path
    run.truncate_metrics(trainer.records_written)
    logger.bind(payload={"checkpoint": str(path), "step": trainer.step}).info("Resuming run")
    trainer.run(stop_after=stop_after)
    _summarize(trainer)
    return trainer


def _summarize(trainer: Trainer) -> None:
    if trainer.stopped or trainer.run_dir is None:
        return
    final = trainer.final_evaluation()
    trainer.run_dir.write_summary(final.per_class_iou, final.miou)
