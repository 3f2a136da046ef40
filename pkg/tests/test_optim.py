import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metapix.autodiff import default_dtype, parameter
from metapix.nn import Adam
from metapix.schemas import OptimizerConfig


def _param(values, name="p"):
    return parameter(np.asarray(values, dtype=np.float64), name=name)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_zero_gradient_is_a_fixpoint(values):
    with default_dtype(np.float64):
        p = _param(values)
        before = p.values.copy()
        opt = Adam(OptimizerConfig(lr=0.1, decay="none"))
        assert opt.step([p], [np.zeros_like(before)])
    assert p.values.tobytes() == before.tobytes()


def test_first_step_moves_by_learning_rate(f64):
    p = _param([1.0, -2.0])
    opt = Adam(OptimizerConfig(lr=0.01, decay="none"))
    opt.step([p], [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p.values, [0.99, -1.99], rtol=1e-6)
    assert opt.t == 1


def test_non_finite_gradient_rejects_update(f64, log_records):
    p = _param([1.0, 2.0])
    opt = Adam(OptimizerConfig(decay="none"))
    assert not opt.step([p], [np.array([np.nan, 1.0])])
    np.testing.assert_array_equal(p.values, [1.0, 2.0])
    assert opt.t == 0 and not opt.m
    assert any("Non-finite gradient" in r["message"] for r in log_records)


def test_skipped_parameters_are_untouched(f64):
    a, b = _param([1.0], "a"), _param([1.0], "b")
    opt = Adam(OptimizerConfig(decay="none"))
    opt.step([a, b], [np.array([1.0]), np.array([np.inf])], skip=[1])
    assert a.values[0] < 1.0
    assert b.values[0] == 1.0
    assert "b" not in opt.m


def test_polynomial_decay(f64):
    opt = Adam(OptimizerConfig(lr=1e-3, decay="poly", power=0.9), total_steps=100)
    assert opt.lr(0) == pytest.approx(1e-3)
    assert opt.lr(50) == pytest.approx(1e-3 * 0.5 ** 0.9)
    assert opt.lr(100) == 0.0
    assert opt.lr(150) == 0.0
    assert Adam(OptimizerConfig(lr=1e-3, decay="none"), total_steps=100).lr(50) == 1e-3


def test_state_round_trip_continues_identically(f64):
    config = OptimizerConfig(decay="poly")
    grads = [np.array([0.3, -0.1]), np.array([-0.2, 0.4]), np.array([0.05, 0.05])]
    p = _param([0.5, 0.5])
    opt = Adam(config, total_steps=10)
    for g in grads[:2]:
        opt.step([p], [g])

    q = _param(p.values.copy())
    clone = Adam(config, total_steps=10)
    clone.load_state("opt", opt.state_tensors("opt"), opt.state_meta())
    opt.step([p], [grads[2]])
    clone.step([q], [grads[2]])
    assert p.values.tobytes() == q.values.tobytes()
    assert clone.t == opt.t == 3


def test_reset_clears_moments(f64):
    opt = Adam(OptimizerConfig())
    opt.step([_param([1.0])], [np.array([1.0])])
    opt.reset()
    assert opt.t == 0 and not opt.m and not opt.v
