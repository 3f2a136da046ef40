import pytest

from metapix.core.errors import ConfigError
from metapix.meta import run_ablation
from metapix.meta.ablation import variants
from metapix.runs import RunDirectory


def test_split_sweep_variants(make_config):
    config = make_config()
    found = variants(config, "split")
    assert [v.name for v in found] == ["joint_k0", "joint_k1", "joint_k5", "target_only"]
    assert all(v.changes["schedule"]["N1"] == config.schedule.seg_steps for v in found)
    assert [v.mode for v in found] == ["pretrain", "pretrain", "pretrain", "target_only"]


def test_weight_mode_variants(make_config):
    found = variants(make_config(), "weight-mode")
    assert [(v.name, v.changes["network"]["weight_mode"]) for v in found] == [
        ("metapix_single", "single"),
        ("metapix_per_class", "per_class"),
    ]
    with pytest.raises(ConfigError):
        variants(make_config(), "depth")


def test_split_ablation_writes_table(make_config, tiny_data, tmp_path):
    config = make_config(schedule={"N1": 2, "N2": 1, "N3": 1, "G": 1})
    run = RunDirectory.create("ablate-split", tmp_path)
    results = run_ablation(config, tiny_data, "split", run)
    assert [r.split_at for r in results] == [0, 1, 5, 1]
    lines = (run.path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,miou"
    assert [line.split(",")[0] for line in lines[1:]] == ["joint_k0", "joint_k1", "joint_k5", "target_only"]
    assert (run.path / "joint_k5" / "config.json").exists()
    assert (run.path / "joint_k5" / "summary.csv").exists()
