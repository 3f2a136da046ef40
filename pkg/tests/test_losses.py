import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metapix.core.errors import DataError, LossError, ShapeError
from metapix.autodiff import Graph, constant, default_dtype, parameter
from metapix.losses import joint_loss, one_hot, pixel_ce

IGNORE = 255


def _problem(seed: int, classes: int = 4, size: int = 4):
    rng = np.random.default_rng(seed)
    logits = constant(rng.normal(size=(2, classes, size, size)))
    label = rng.integers(0, classes, size=(2, size, size))
    return logits, label


def test_one_hot_planes(f64):
    label = np.array([[[2, IGNORE]]])
    planes = one_hot(label, 4).values
    np.testing.assert_array_equal(planes[0, :, 0, 0], [0, 0, 1, 0])
    np.testing.assert_array_equal(planes[0, :, 0, 1], [0, 0, 0, 0])


def test_one_hot_argmax_recovers_labels(f64):
    label = np.random.default_rng(0).integers(0, 5, size=(2, 6, 6))
    np.testing.assert_array_equal(one_hot(label, 5).values.argmax(axis=1), label)


def test_one_hot_rejects_out_of_range_and_names_pixel(f64):
    label = np.zeros((1, 3, 3), dtype=np.int64)
    label[0, 1, 2] = 7
    with pytest.raises(DataError) as info:
        one_hot(label, 4)
    assert info.value.details["pixel"] == [0, 1, 2]
    assert info.value.details["value"] == 7


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_unit_weights_match_plain_loss_bitwise(dtype):
    with default_dtype(dtype):
        logits, label = _problem(1)
        logits = constant(logits.values.astype(dtype))
        plain = pixel_ce(logits, label).value.values
        ones = constant(np.ones((2, 1, 4, 4), dtype=dtype))
        weighted = pixel_ce(logits, label, ones).value.values
    assert plain.tobytes() == weighted.tobytes()


def test_half_weights_give_exactly_half(f64):
    logits, label = _problem(2)
    plain = pixel_ce(logits, label).item()
    half = pixel_ce(logits, label, constant(np.full((2, 1, 4, 4), 0.5))).item()
    assert half == 0.5 * plain


def test_uniform_logits_give_log_of_class_count(f64):
    label = np.random.default_rng(3).integers(0, 4, size=(1, 4, 4))
    loss = pixel_ce(constant(np.zeros((1, 4, 4, 4))), label)
    assert abs(loss.item() - math.log(4)) < 1e-6
    assert loss.valid_pixel_count == 16


def test_ignored_pixels_contribute_nothing_but_keep_divisor(f64):
    logits, label = _problem(4)
    masked = label.copy()
    masked[0, 0, 0] = IGNORE
    full = pixel_ce(logits, label)
    partial = pixel_ce(logits, masked)
    assert partial.valid_pixel_count == full.valid_pixel_count - 1
    log_probs = logits.values - np.log(np.exp(logits.values).sum(axis=1, keepdims=True))
    dropped = -log_probs[0, label[0, 0, 0], 0, 0] / label.size
    assert partial.item() == pytest.approx(full.item() - dropped, rel=1e-12)


def test_every_pixel_ignored_is_an_empty_loss(f64):
    logits, _ = _problem(5)
    with pytest.raises(LossError, match="empty loss"):
        pixel_ce(logits, np.full((2, 4, 4), IGNORE))


def test_per_class_weights_select_ground_truth_channel(f64):
    logits, label = _problem(6)
    scale = np.arange(1.0, 5.0)[None, :, None, None] * np.ones((2, 4, 4, 4))
    weighted = pixel_ce(logits, label, constant(scale)).item()
    log_probs = logits.values - np.log(np.exp(logits.values).sum(axis=1, keepdims=True))
    ce = -np.take_along_axis(log_probs, label[:, None], axis=1)[:, 0]
    assert weighted == pytest.approx(float(((label + 1) * ce).sum() / label.size), rel=1e-12)


def test_shape_errors(f64):
    logits, label = _problem(7)
    with pytest.raises(ShapeError):
        pixel_ce(logits, label[:, :2])
    with pytest.raises(ShapeError):
        pixel_ce(logits, label, constant(np.ones((2, 2, 4, 4))))
    with pytest.raises(ShapeError):
        pixel_ce(constant(np.zeros((4, 4))), label)


def test_gradient_is_softmax_minus_onehot(f64):
    rng = np.random.default_rng(8)
    values = rng.normal(size=(1, 3, 2, 2))
    label = rng.integers(0, 3, size=(1, 2, 2))
    logits = parameter(values, name="logits")
    with Graph() as graph:
        (grad,) = graph.grad(pixel_ce(logits, label).value, [logits])
    softmax = np.exp(values) / np.exp(values).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[label].transpose(0, 3, 1, 2)
    np.testing.assert_allclose(grad.values, (softmax - onehot) / 4, rtol=1e-12, atol=1e-15)


def test_joint_loss_adds(f64):
    logits, label = _problem(9)
    a, b = pixel_ce(logits, label), pixel_ce(logits, label)
    total = joint_loss(a, b)
    assert total.item() == pytest.approx(2 * a.item())
    assert total.valid_pixel_count == 2 * a.valid_pixel_count


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.1, 10.0))
def test_weighted_loss_is_homogeneous_in_the_weights(seed, factor):
    with default_dtype(np.float64):
        logits, label = _problem(seed)
        weights = np.random.default_rng(seed + 1).uniform(0.0, 1.0, size=(2, 1, 4, 4))
        base = pixel_ce(logits, label, constant(weights)).item()
        scaled = pixel_ce(logits, label, constant(factor * weights)).item()
    assert scaled == pytest.approx(factor * base, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_weighted_loss_is_monotone_in_the_weights(seed):
    with default_dtype(np.float64):
        logits, label = _problem(seed)
        rng = np.random.default_rng(seed + 2)
        low = rng.uniform(0.0, 1.0, size=(2, 1, 4, 4))
        high = low + rng.uniform(0.0, 1.0, size=low.shape)
        assert pixel_ce(logits, label, constant(low)).item() <= pixel_ce(logits, label, constant(high)).item()
