from typing import List, Optional

from pydantic import BaseModel, Field


class ParamCheck(BaseModel):
    name: str
    index: int
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float


class CheckReport(BaseModel):
    """Finite-difference certification of one gradient computation."""
    name: str
    seed: Optional[int] = None
    step: float
    tolerance: float
    floor: float
    threshold: float = 0.0
    entries: List[ParamCheck] = Field(default_factory=list)
    nonfinite: List[str] = Field(default_factory=list)
    kinks: List[str] = Field(default_factory=list)
    max_rel_err: float = 0.0
    checked: int = 0
    passed: bool = False


class GradcheckSummary(BaseModel):
    passed: bool
    reports: List[CheckReport]


class StepRecord(BaseModel):
    step: int
    phase: str
    generation: int
    loss_s: Optional[float] = None
    loss_t: Optional[float] = None
    lr: Optional[float] = None
    w_mean: Optional[float] = None
    w_min: Optional[float] = None
    w_max: Optional[float] = None
    skipped: bool = False


class EvalRecord(BaseModel):
    step: int
    phase_end: str
    generation: int
    per_class_iou: List[Optional[float]]
    miou: float
    w_corrupt_mean: Optional[float] = None
    w_clean_mean: Optional[float] = None
