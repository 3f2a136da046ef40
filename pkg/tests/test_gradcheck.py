import numpy as np
import pytest

from metapix.autodiff import PRIMITIVES, constant, default_dtype, no_grad, ops, parameter
from metapix.gradcheck import (
    check_meta_gradient,
    check_primitives,
    compare,
    finite_diff,
    meta_gradient,
    run_gradcheck,
    tiny_problem,
)
from metapix.schemas import GradcheckConfig


def test_finite_difference_of_a_square(f64):
    x = parameter(3.0, name="x")
    fd = finite_diff(lambda: float(x.values ** 2), [x], 1e-5)
    assert not fd.nonfinite
    assert not fd.kinks
    assert abs(float(fd.numeric[0]) - 6.0) < 1e-8
    assert float(x.values) == 3.0


def test_finite_difference_reports_non_finite_points(f64):
    x = parameter(np.array([1.0, 0.0]), name="x")

    def loss_fn() -> float:
        with np.errstate(invalid="ignore"):
            return float(x.values[0] ** 2 + np.sqrt(x.values[1]))

    fd = finite_diff(loss_fn, [x], 1e-5)
    assert fd.nonfinite == ["x[1]"]
    assert np.isnan(fd.numeric[0][1])
    assert fd.numeric[0][0] == pytest.approx(2.0)


def test_finite_difference_flags_relu_crossings(f64):
    x = parameter(np.array([1e-7, 0.5, -0.5]), name="x")

    def loss_fn() -> float:
        with no_grad():
            return ops.sum(ops.relu(x)).item()

    fd = finite_diff(loss_fn, [x], 1e-5)
    assert fd.kinks == ["x[0]"]
    np.testing.assert_allclose(fd.numeric[0][1:], [1.0, 0.0], atol=1e-9)


def test_finite_difference_works_in_extended_precision():
    with default_dtype(np.longdouble):
        x = parameter(np.array([0.5, 2.0], dtype=np.longdouble), name="x")
        fd = finite_diff(lambda: (x.values ** 3).sum(), [x], 1e-6)
    assert fd.numeric[0].dtype == np.longdouble
    np.testing.assert_allclose(fd.numeric[0].astype(np.float64), [0.75, 12.0], rtol=1e-7)
    assert fd.resolution == pytest.approx(64 * np.finfo(np.longdouble).eps * 8.125 / 1e-6)


def test_compare_excludes_elements_below_the_floor(f64):
    p = parameter(np.zeros(3), name="p")
    analytic = [constant(np.array([1.0, 1e-12, 2.0]))]
    numeric = [np.array([1.0, 0.0, 2.0 + 1e-9])]
    report = compare("demo", [p], analytic, numeric, step=1e-5, tolerance=1e-6, floor=1e-10)
    assert report.passed
    assert report.checked == 2
    assert len(report.entries) == 3
    assert report.max_rel_err == pytest.approx(1e-9 / (2.0 + 1e-9))

    failing = compare("demo", [p], [constant(np.array([1.0, 0.0, 3.0]))], numeric,
                      step=1e-5, tolerance=1e-6, floor=1e-10)
    assert not failing.passed


def test_compare_leaves_out_kinks_and_unresolved_elements(f64):
    p = parameter(np.zeros(3), name="p")
    analytic = [constant(np.array([1.0, 5.0, 1e-4]))]
    numeric = [np.array([1.0, 3.0, 2e-4])]
    report = compare("demo", [p], analytic, numeric, step=1e-5, tolerance=1e-6, floor=1e-10,
                     kinks=["p[1]"], resolution=1e-9)
    assert report.threshold == pytest.approx(1e-3)
    assert report.kinks == ["p[1]"]
    assert report.checked == 1
    assert report.passed
    assert len(report.entries) == 3


def test_every_primitive_is_certified():
    reports = check_primitives(seed=0)
    kinds = {r.name.replace("_scalar", "").replace("_stride2", "") for r in reports}
    assert kinds == set(PRIMITIVES)
    failed = [(r.name, r.max_rel_err, r.nonfinite) for r in reports if not r.passed]
    assert not failed


def test_meta_gradient_vanishes_without_inner_step():
    config = GradcheckConfig()
    with default_dtype(np.float64):
        problem = tiny_problem(0, config)
        grads = meta_gradient(*problem, alpha=0.0)
    assert all(np.all(g.values == 0) for g in grads)


def test_meta_gradient_is_first_order_in_the_inner_rate():
    config = GradcheckConfig()
    with default_dtype(np.float64):
        problem = tiny_problem(0, config)
        small = meta_gradient(*problem, alpha=1e-3)
        double = meta_gradient(*problem, alpha=2e-3)
    norm = lambda grads: np.sqrt(sum(float((g.values ** 2).sum()) for g in grads))
    assert 1.8 <= norm(double) / norm(small) <= 2.2

def test_tiny_problem_has_a_few_hundred_meta_parameters():
    with default_dtype(np.float64):
        _, wnet, batch_s, batch_t = tiny_problem(0, GradcheckConfig())
    assert 100 <= wnet.num_parameters() <= 1000
    assert batch_s.image.shape == (1, 3, 32, 32)
    assert batch_t.domain == "target"


def test_tiny_problem_shares_labels_and_keeps_biases_positive():
    seg, wnet, batch_s, batch_t = tiny_problem(2, GradcheckConfig())
    np.testing.assert_array_equal(batch_s.label, batch_t.label)
    assert set(np.unique(batch_s.label)) == {0, 1}
    assert not np.array_equal(batch_s.image.values, batch_t.image.values)
    biases = [t.values for net in (seg, wnet) for name, t in net.named_parameters().items() if name.endswith(".bias")]
    assert all(np.all((b >= 0.05) & (b <= 0.2)) for b in biases)


def test_tiny_problem_values_do_not_depend_on_precision():
    config = GradcheckConfig()
    _, wnet, batch_s, _ = tiny_problem(1, config)
    _, wide, wide_s, _ = tiny_problem(1, config, np.longdouble)
    assert wide.params["enc1.weight"].dtype == np.longdouble
    for name, tensor in wnet.named_parameters().items():
        np.testing.assert_array_equal(wide.params[name].values.astype(np.float64), tensor.values)
    np.testing.assert_array_equal(wide_s.image.values.astype(np.float64), batch_s.image.values)


@pytest.mark.slow
def test_meta_gradient_certified_seed_zero():
    report = check_meta_gradient(seed=0)
    assert report.passed, (report.max_rel_err, report.nonfinite)
    assert report.checked > 0
    assert len(report.kinks) < len(report.entries) // 2


@pytest.mark.slow
def test_meta_gradient_zero_inner_rate_numeric_is_zero():
    report = check_meta_gradient(seed=0, alpha=0.0)
    assert max(abs(e.numeric) for e in report.entries) < 1e-8


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("step", [1e-4, 1e-5, 1e-6])
def test_pass_status_is_stable_across_steps(seed, step):
    report = check_meta_gradient(seed=seed, config=GradcheckConfig(step=step))
    assert report.passed, (report.max_rel_err, report.nonfinite)
    assert report.checked > 0


@pytest.mark.slow
def test_full_certification():
    summary = run_gradcheck(GradcheckConfig())
    assert summary.passed
    assert len(summary.reports) == 3 * (len(check_primitives(0)) + 1)
