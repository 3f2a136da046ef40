from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pytest
from loguru import logger

from metapix.autodiff import default_dtype
from metapix.core.config import get_settings
from metapix.data import Dataset, generate
from metapix.schemas import DatasetSpec, RunConfig

TINY_SPEC = {
    "image_size": 32,
    "num_classes": 3,
    "n_source": 20,
    "n_target_train": 4,
    "n_target_val": 4,
    "seed": 0,
}

TINY_NETWORK = {
    "num_classes": 3,
    "split_at": 1,
    "seg_widths": [4, 4, 4, 4, 4],
    "weight_widths": [4, 4, 4, 4],
}

TINY_SCHEDULE = {
    "N1": 4,
    "N2": 2,
    "N3": 2,
    "G": 2,
    "alpha": 1e-3,
    "beta": 1e-3,
    "checkpoint_every": 3,
    "weight_eval_images": 20,
}


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(**TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory, tiny_spec) -> Path:
    root = tmp_path_factory.mktemp("tiny-data")
    generate(tiny_spec, root)
    return root


@pytest.fixture
def tiny_data(tiny_root) -> Dataset:
    return Dataset.open(tiny_root)


@pytest.fixture
def config_data(tiny_root, tmp_path) -> Dict[str, Any]:
    """Raw tiny run configuration; tests adjust it before validation."""
    return {
        "seed": 0,
        "precision": "float64",
        "data_dir": str(tiny_root),
        "run_root": str(tmp_path / "runs"),
        "dataset": dict(TINY_SPEC),
        "network": dict(TINY_NETWORK),
        "schedule": dict(TINY_SCHEDULE),
    }


@pytest.fixture
def make_config(config_data):
    def make(**sections: Dict[str, Any]) -> RunConfig:
        data = {key: (dict(value) if isinstance(value, dict) else value) for key, value in config_data.items()}
        for section, values in sections.items():
            if isinstance(values, dict):
                data.setdefault(section, {}).update(values)
            else:
                data[section] = values
        return RunConfig.model_validate(data)
    return make


@pytest.fixture
def log_records() -> List[dict]:
    records: List[dict] = []
    sink = logger.add(lambda message: records.append(message.record), level="DEBUG")
    yield records
    logger.remove(sink)


@pytest.fixture
def clean_settings(monkeypatch):
    get_settings.cache_clear()
    yield monkeypatch
    get_settings.cache_clear()
