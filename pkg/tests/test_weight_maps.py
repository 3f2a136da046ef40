import numpy as np
import pytest

from metapix.core.errors import ShapeError
from metapix.autodiff import constant
from metapix.eval import (
    export_weight_map,
    quantize_weights,
    read_weight_map,
    select_weights,
    weight_separation,
    weight_stats,
)
from metapix.nn import build_weight_net


def test_quantization_rounds_half_up():
    np.testing.assert_array_equal(quantize_weights(np.array([0.0, 0.5, 1.0, 1.2])), [0, 128, 255, 255])


def test_export_and_read(tmp_path):
    weights = np.full((1, 1, 8, 8), 0.25)
    weights[0, 0, :4] = 0.75
    path = export_weight_map(constant(weights), tmp_path / "maps" / "0000.png")
    back = read_weight_map(path)
    assert back.shape == (8, 8)
    np.testing.assert_allclose(back, weights[0, 0], atol=0.5 / 255)


def test_export_rejects_batches(tmp_path):
    with pytest.raises(ShapeError):
        export_weight_map(np.zeros((2, 1, 8, 8)), tmp_path / "x.png")


def test_per_class_maps_use_ground_truth_channel():
    weights = np.stack([np.full((2, 2), 0.1), np.full((2, 2), 0.2), np.full((2, 2), 0.3)])[None]
    label = np.array([[[0, 2], [1, 255]]])
    np.testing.assert_allclose(select_weights(weights, label)[0], [[0.1, 0.3], [0.2, 0.1]])
    np.testing.assert_allclose(select_weights(weights)[0], np.full((2, 2), 0.1))


def test_initial_weights_do_not_separate(f64, tiny_data):
    wnet = build_weight_net(3, [2, 2, 2, 2])
    stats = weight_separation(wnet, tiny_data, limit=20)
    assert stats["w_corrupt_mean"] == pytest.approx(0.5)
    assert stats["w_clean_mean"] == pytest.approx(0.5)
    assert stats["ratio"] == pytest.approx(1.0)


def test_weight_stats_skip_ignored_pixels():
    weights = np.array([[[[0.2, 0.4], [0.9, 0.0]]]])
    label = np.array([[[0, 1], [255, 255]]])
    stats = weight_stats(weights, label)
    assert stats["w_mean"] == pytest.approx(0.3)
    assert stats["w_min"] == pytest.approx(0.2)
    assert stats["w_max"] == pytest.approx(0.4)
    assert weight_stats(weights, np.full((1, 2, 2), 255)) == {}
