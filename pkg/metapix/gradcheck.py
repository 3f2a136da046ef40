"""
Finite-difference certification of the engine's gradients.

``finite_diff`` only ever evaluates a loss; it never calls a backward rule
for the quantity it differentiates. Analytic gradients are computed in
float64; the meta-gradient oracle evaluates its loss in extended precision
(``np.longdouble``) unless ``oracle_precision`` says otherwise.

Relative error per element is |a - n| / max(|a|, |n|). Elements are reported
but left out of the maximum when their numeric value is at or below the
floor, when the evaluation's rounding noise could not resolve them to the
tolerance, or when a relu or maxpool2 took a different branch at p + h or
p - h than at p.
"""

import hashlib
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from metapix.core.errors import GradcheckFailed
from metapix.autodiff import (
    Graph,
    Tensor,
    apply_primitive,
    constant,
    default_dtype,
    no_grad,
    ops,
    parameter,
    trace_branches,
)
from metapix.data.loader import Batch
from metapix.meta.steps import meta_losses
from metapix.nn.segnet import SegNet, build_seg_net
from metapix.nn.weightnet import WeightNet, build_weight_net
from metapix.schemas import CheckReport, GradcheckConfig, GradcheckSummary, ParamCheck

# Rounding error of one loss evaluation, in units of its dtype's epsilon.
ROUNDING_ULPS = 64

ORACLE_DTYPES = {"float64": np.float64, "extended": np.longdouble}

Scalar = Union[float, np.floating]


class FiniteDiff(NamedTuple):
    numeric: List[np.ndarray]
    nonfinite: List[str]
    kinks: List[str]
    resolution: float


def _evaluate(loss_fn: Callable[[], Scalar]) -> Tuple[Scalar, str]:
    """The loss and a digest of the branch every relu and maxpool2 took."""
    with trace_branches() as masks:
        value = loss_fn()
    digest = hashlib.blake2b(digest_size=16)
    for mask in masks:
        digest.update(repr(mask.shape).encode())
        digest.update(np.packbits(mask).tobytes())
    return value, digest.hexdigest()


def finite_diff(loss_fn: Callable[[], Scalar], params: Sequence[Tensor], step: float = 1e-5) -> FiniteDiff:
    """
    Central differences (f(p + h) - f(p - h)) / 2h for every element of every
    parameter, the others held fixed. ``loss_fn`` reads the parameters' current
    values and may return a float or a numpy scalar of any precision; the
    divisor is the representable span between p - h and p + h.

    Returns:
        FiniteDiff: numeric gradients; elements whose evaluation was not finite
        (their gradient is NaN); elements where some branch differed from the
        one taken at p; and ``resolution``, the absolute rounding noise of one
        numeric element.
    """
    base, pattern = _evaluate(loss_fn)
    numeric: List[np.ndarray] = []
    nonfinite: List[str] = []
    kinks: List[str] = []
    for position, param in enumerate(params):
        original = param.values
        result = np.zeros(original.shape, dtype=np.result_type(original.dtype, np.float64))
        try:
            for i in range(original.size):
                label = f"{param.name or position}[{i}]"
                shifted = original.copy()
                shifted.flat[i] = original.flat[i] + step
                up = shifted.flat[i]
                param.values = shifted
                upper, upper_pattern = _evaluate(loss_fn)
                shifted = original.copy()
                shifted.flat[i] = original.flat[i] - step
                down = shifted.flat[i]
                param.values = shifted
                lower, lower_pattern = _evaluate(loss_fn)
                if not (np.isfinite(upper) and np.isfinite(lower)):
                    result.flat[i] = np.nan
                    nonfinite.append(label)
                    continue
                result.flat[i] = (upper - lower) / (up - down)
                if upper_pattern != pattern or lower_pattern != pattern:
                    kinks.append(label)
        finally:
            param.values = original
        numeric.append(result)
    dtype = np.asarray(base).dtype
    eps = np.finfo(dtype if dtype.kind == "f" else np.float64).eps
    scale = abs(base) if np.isfinite(base) else 0.0
    return FiniteDiff(numeric, nonfinite, kinks, float(ROUNDING_ULPS * eps * scale / step))


def compare(name: str, params: Sequence[Tensor], analytic: Sequence[Tensor], numeric: Sequence[np.ndarray],
            *, step: float, tolerance: float, floor: float, nonfinite: Sequence[str] = (),
            kinks: Sequence[str] = (), resolution: float = 0.0, seed: Optional[int] = None) -> CheckReport:
    """
    Elementwise comparison. An element counts toward the maximum only when
    its numeric value exceeds ``max(floor, resolution / tolerance)`` and it is
    not listed in ``kinks``.
    """
    threshold = max(floor, resolution / tolerance)
    report = CheckReport(name=name, seed=seed, step=step, tolerance=tolerance, floor=floor,
                         threshold=threshold, nonfinite=list(nonfinite), kinks=list(kinks))
    skipped = set(kinks)
    worst = 0.0
    for position, (param, a_grad, n_grad) in enumerate(zip(params, analytic, numeric)):
        a_flat = np.asarray(a_grad.values, dtype=np.float64).reshape(-1)
        n_flat = np.asarray(n_grad, dtype=np.float64).reshape(-1)
        label = param.name or str(position)
        for index, (a, n) in enumerate(zip(a_flat, n_flat)):
            if not (np.isfinite(a) and np.isfinite(n)):
                if f"{label}[{index}]" not in report.nonfinite:
                    report.nonfinite.append(f"{label}[{index}]")
                continue
            abs_err = abs(a - n)
            scale = max(abs(a), abs(n))
            rel_err = abs_err / scale if scale > 0 else 0.0
            report.entries.append(ParamCheck(name=label, index=index, analytic=float(a),
                                             numeric=float(n), abs_err=float(abs_err), rel_err=float(rel_err)))
            if abs(n) > threshold and f"{label}[{index}]" not in skipped:
                report.checked += 1
                worst = max(worst, rel_err)
    report.max_rel_err = float(worst)
    report.passed = not report.nonfinite and worst < tolerance
    level = "DEBUG" if report.passed else "WARNING"
    logger.bind(payload={"max_rel_err": report.max_rel_err, "checked": report.checked,
                         "kinks": len(report.kinks), "nonfinite": report.nonfinite[:5]}).log(
        level, f"gradcheck {name}{'' if seed is None else f' seed {seed}'}: {'pass' if report.passed else 'FAIL'}"
    )
    return report


# Primitive cases: (name, primitive, inputs, attrs). Float inputs are checked;
# integer arrays passed through attrs are not.

def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, str, List[np.ndarray], Dict]]:
    def positive(*shape):
        return rng.uniform(0.5, 1.5, size=shape)

    def signed(*shape):
        values = rng.uniform(0.01, 1.0, size=shape)
        return values * rng.choice([-1.0, 1.0], size=shape)

    spaced = rng.permutation(32).reshape(1, 2, 4, 4) * 0.05 + 0.1
    index = rng.integers(0, 3, size=(1, 2, 2))
    index[0, 0, 0] = 255
    return [
        ("add", "add", [positive(3, 4), positive(3, 4)], {}),
        ("add_scalar", "add", [positive(3, 4), positive()], {}),
        ("mul", "mul", [positive(3, 4), positive(3, 4)], {}),
        ("mul_scalar", "mul", [positive(3, 4), positive()], {}),
        ("scale", "scale", [positive(3, 4)], {"factor": 1.7}),
        ("shift", "shift", [positive(3, 4)], {"offset": 0.3}),
        ("exp", "exp", [positive(3, 4)], {}),
        ("sigmoid", "sigmoid", [signed(3, 4) * 3.0], {}),
        ("relu", "relu", [signed(3, 4)], {}),
        ("sum", "sum", [positive(2, 3)], {}),
        ("fill", "fill", [positive()], {"shape": (2, 3)}),
        ("sum_channels", "sum_channels", [positive(1, 3, 2, 2)], {}),
        ("expand_channels", "expand_channels", [positive(1, 1, 2, 2)], {"channels": 3}),
        ("broadcast_bias", "broadcast_bias", [positive(3)], {"shape": (1, 3, 2, 2)}),
        ("reduce_bias", "reduce_bias", [positive(1, 3, 2, 2)], {}),
        ("log_softmax", "log_softmax", [signed(1, 3, 2, 2)], {}),
        ("gather", "gather", [positive(1, 3, 2, 2)], {"index": index}),
        ("conv2d", "conv2d", [positive(1, 2, 4, 4), positive(2, 2, 3, 3)], {"stride": 1}),
        ("conv2d_stride2", "conv2d", [positive(1, 2, 4, 4), positive(2, 2, 3, 3)], {"stride": 2}),
        ("conv2d_input_grad", "conv2d_input_grad", [positive(1, 2, 4, 4), positive(2, 2, 3, 3)],
         {"input_shape": (1, 2, 4, 4), "stride": 1}),
        ("conv2d_input_grad_stride2", "conv2d_input_grad", [positive(1, 2, 2, 2), positive(2, 2, 3, 3)],
         {"input_shape": (1, 2, 4, 4), "stride": 2}),
        ("conv2d_weight_grad", "conv2d_weight_grad", [positive(1, 2, 4, 4), positive(1, 2, 4, 4)],
         {"kernel": 3, "stride": 1}),
        ("conv2d_weight_grad_stride2", "conv2d_weight_grad", [positive(1, 2, 4, 4), positive(1, 2, 2, 2)],
         {"kernel": 3, "stride": 2}),
        ("maxpool2", "maxpool2", [spaced], {}),
        ("upsample2", "upsample2", [positive(1, 2, 2, 2)], {}),
        ("sumpool2", "sumpool2", [positive(1, 2, 4, 4)], {}),
        ("concat", "concat", [positive(1, 1, 2, 2), positive(1, 2, 2, 2)], {}),
        ("slice_channels", "slice_channels", [positive(1, 4, 2, 2)], {"start": 1, "stop": 3}),
        ("pad_channels", "pad_channels", [positive(1, 2, 2, 2)], {"start": 1, "total": 4}),
    ]


def check_primitive(name: str, kind: str, arrays: Sequence[np.ndarray], attrs: Dict,
                    rng: np.random.Generator, config: GradcheckConfig, seed: Optional[int] = None) -> CheckReport:
    """Certify one primitive with the scalar loss sum(y * R) for a fixed positive R."""
    with default_dtype(np.float64):
        inputs = [parameter(np.asarray(a, dtype=np.float64), name=f"{name}.in{i}") for i, a in enumerate(arrays)]
        with no_grad():
            shape = apply_primitive(kind, inputs, attrs).shape
        mix = constant(rng.uniform(0.5, 1.5, size=shape))

        def loss_fn() -> float:
            with no_grad():
                return ops.sum(ops.mul(apply_primitive(kind, inputs, attrs), mix)).item()

        with Graph(f"check-{name}") as graph:
            loss = ops.sum(ops.mul(apply_primitive(kind, inputs, attrs), mix))
            analytic = graph.grad(loss, inputs)
        fd = finite_diff(loss_fn, inputs, config.step)
        return compare(name, inputs, analytic, fd.numeric, step=config.step, tolerance=config.primitive_tolerance,
                       floor=config.floor, nonfinite=fd.nonfinite, kinks=fd.kinks, seed=seed)


def check_primitives(seed: int = 0, config: Optional[GradcheckConfig] = None) -> List[CheckReport]:
    config = config or GradcheckConfig()
    rng = np.random.default_rng(seed)
    return [check_primitive(name, kind, arrays, attrs, rng, config, seed)
            for name, kind, arrays, attrs in _primitive_cases(rng)]



def tiny_problem(seed: int, config: GradcheckConfig,
                 dtype=np.float64) -> Tuple[SegNet, WeightNet, Batch, Batch]:
    """
    Networks and one fixed batch per domain for the meta-gradient check.

    Both domains share one label map: background plus one rectangle per
    foreground class. Each domain paints the classes in its own colours with
    a little noise. Every bias is drawn from U(0.05, 0.2) so few relus sit at
    zero. The values do not depend on ``dtype``.
    """
    with default_dtype(dtype):
        seg = build_seg_net(config.num_classes, config.split_at, config.seg_widths, seed=seed)
        wnet = build_weight_net(config.num_classes, config.weight_widths, config.weight_mode,
                                seed=seed + 1, zero_head=False)
    rng = np.random.default_rng([seed, 99])
    for net in (seg, wnet):
        for name, tensor in net.named_parameters().items():
            if name.endswith(".bias"):
                tensor.values = rng.uniform(0.05, 0.2, size=tensor.shape).astype(dtype)

    size = config.image_size
    label = np.zeros((1, size, size), dtype=np.int64)
    for cls in range(1, config.num_classes):
        top, left = rng.integers(0, size // 2, size=2)
        height, width = rng.integers(size // 4, size // 2 + 1, size=2)
        label[0, top:top + height, left:left + width] = cls

    def batch(domain: str) -> Batch:
        colours = rng.uniform(0.1, 0.9, size=(config.num_classes, 3))
        image = colours[label[0]].transpose(2, 0, 1)[None] + rng.normal(0.0, 0.05, size=(1, 3, size, size))
        return Batch(image=constant(np.clip(image, 0.0, 1.0).astype(dtype)), label=label.copy(),
                     domain=domain, indices=[0])

    return seg, wnet, batch("source"), batch("target")


def meta_gradient(seg: SegNet, wnet: WeightNet, batch_s: Batch, batch_t: Batch, alpha: float) -> List[Tensor]:
    """d loss_t / d phi through one differentiable inner step; nothing is updated."""
    with Graph("meta-gradient") as graph:
        _, _, loss_t = meta_losses(seg, wnet, batch_s, batch_t, alpha)
        return list(graph.grad(loss_t.value, wnet.parameters()))


def meta_loss_value(seg: SegNet, wnet: WeightNet, batch_s: Batch, batch_t: Batch, alpha: float) -> np.floating:
    """loss_t as a numpy scalar in the networks' own precision."""
    with Graph("meta-loss") as graph:
        _, _, loss_t = meta_losses(seg, wnet, batch_s, batch_t, alpha)
        value = loss_t.value.values[()]
    graph.release()
    return value


def check_meta_gradient(seed: int = 0, config: Optional[GradcheckConfig] = None,
                        alpha: Optional[float] = None) -> CheckReport:
    """
    Compare the engine's float64 meta-gradient with finite differences of
    loss_t over every weighting-network parameter. The finite differences
    run on a second copy of the problem built in ``config.oracle_precision``
    (``extended`` is ``np.longdouble``, which is plain float64 on platforms
    without a wider type; the resolution threshold adapts).
    """
    config = config or GradcheckConfig()
    alpha = config.alpha if alpha is None else alpha
    with default_dtype(np.float64):
        seg, wnet, batch_s, batch_t = tiny_problem(seed, config)
        analytic = meta_gradient(seg, wnet, batch_s, batch_t, alpha)

    oracle = ORACLE_DTYPES[config.oracle_precision]
    with default_dtype(oracle):
        o_seg, o_wnet, o_batch_s, o_batch_t = tiny_problem(seed, config, oracle)
        fd = finite_diff(lambda: meta_loss_value(o_seg, o_wnet, o_batch_s, o_batch_t, alpha),
                         o_wnet.parameters(), config.step)
    if fd.kinks:
        logger.bind(payload={"seed": seed, "kinks": fd.kinks[:5]}).debug(
            f"{len(fd.kinks)} meta parameter(s) crossed a relu or maxpool2 branch within the step"
        )
    return compare("meta_gradient", wnet.parameters(), analytic, fd.numeric, step=config.step,
                   tolerance=config.tolerance, floor=config.floor, nonfinite=fd.nonfinite, kinks=fd.kinks,
                   resolution=fd.resolution, seed=seed)


def run_gradcheck(config: Optional[GradcheckConfig] = None, raise_on_failure: bool = False) -> GradcheckSummary:
    config = config or GradcheckConfig()
    reports: List[CheckReport] = []
    for seed in config.seeds:
        reports.extend(check_primitives(seed, config))
        reports.append(check_meta_gradient(seed, config))
    summary = GradcheckSummary(passed=all(r.passed for r in reports), reports=reports)
    failed = [f"{r.name}@{r.seed}" for r in reports if not r.passed]
    if failed:
        logger.bind(payload={"failed": failed}).error(f"{len(failed)} gradient check(s) failed")
        if raise_on_failure:
            raise GradcheckFailed(details={"failed": failed})
    else:
        logger.info(f"All {len(reports)} gradient checks passed")
    return summary
