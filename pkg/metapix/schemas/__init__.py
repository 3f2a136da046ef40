from metapix.schemas.config import (
    IGNORE_ID,
    DatasetSpec,
    GradcheckConfig,
    NetworkConfig,
    OptimizerConfig,
    RunConfig,
    Schedule,
    load_run_config,
)
from metapix.schemas.dataset import Manifest, ManifestEntry
from metapix.schemas.reports import CheckReport, EvalRecord, GradcheckSummary, ParamCheck, StepRecord

__all__ = [
    "IGNORE_ID",
    "CheckReport",
    "DatasetSpec",
    "EvalRecord",
    "GradcheckConfig",
    "GradcheckSummary",
    "Manifest",
    "ManifestEntry",
    "NetworkConfig",
    "OptimizerConfig",
    "ParamCheck",
    "RunConfig",
    "Schedule",
    "StepRecord",
    "load_run_config",
]
