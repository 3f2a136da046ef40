"""Functional front end over the registered primitives."""

from typing import Optional, Sequence, Tuple

import numpy as np

from metapix.core.errors import ShapeError
from metapix.autodiff.graph import apply_primitive
from metapix.autodiff.tensor import Tensor


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [x], {"factor": float(factor)})


def shift(x: Tensor, offset: float) -> Tensor:
    return apply_primitive("shift", [x], {"offset": float(offset)})


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return apply_primitive("sum", [x])


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def fill(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply_primitive("fill", [x], {"shape": tuple(shape)})


def sum_channels(x: Tensor) -> Tensor:
    return apply_primitive("sum_channels", [x])


def expand_channels(x: Tensor, channels: int) -> Tensor:
    return apply_primitive("expand_channels", [x], {"channels": int(channels)})


def broadcast_bias(b: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply_primitive("broadcast_bias", [b], {"shape": tuple(shape)})


def reduce_bias(x: Tensor) -> Tensor:
    return apply_primitive("reduce_bias", [x])


def log_softmax(x: Tensor) -> Tensor:
    """Log-probabilities over the channel axis of [B, C, H, W] logits."""
    return apply_primitive("log_softmax", [x])


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick channel ``index[b, h, w]`` of each pixel; out-of-range indices give 0."""
    return apply_primitive("gather", [x], {"index": np.asarray(index, dtype=np.int64)})


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *, stride: int = 1) -> Tensor:
    out = apply_primitive("conv2d", [x, w], {"stride": stride})
    if b is not None:
        out = add(out, broadcast_bias(b, out.shape))
    return out


def conv2d_input_grad(gy: Tensor, w: Tensor, input_shape: Tuple[int, ...], *, stride: int = 1) -> Tensor:
    return apply_primitive("conv2d_input_grad", [gy, w], {"input_shape": tuple(input_shape), "stride": stride})


def conv2d_weight_grad(x: Tensor, gy: Tensor, kernel: int, *, stride: int = 1) -> Tensor:
    return apply_primitive("conv2d_weight_grad", [x, gy], {"kernel": int(kernel), "stride": stride})


def maxpool2(x: Tensor) -> Tensor:
    return apply_primitive("maxpool2", [x])


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two."""
    return apply_primitive("upsample2", [x])


def sumpool2(x: Tensor) -> Tensor:
    return apply_primitive("sumpool2", [x])


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    return apply_primitive("concat", list(xs))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return apply_primitive("slice_channels", [x], {"start": int(start), "stop": int(stop)})


def pad_channels(x: Tensor, start: int, total: int) -> Tensor:
    return apply_primitive("pad_channels", [x], {"start": int(start), "total": int(total)})


def differentiable_step(theta: Sequence[Tensor], g: Sequence[Tensor], alpha: float) -> list:
    """
    One plain gradient-descent step, theta - alpha * g, kept in the graph.

    When ``g`` was produced by ``grad(..., create_graph=True)`` the result keeps
    its dependence on whatever ``g`` depends on, so a later loss evaluated at
    the stepped parameters can be differentiated through the step.
    """
    theta, g = list(theta), list(g)
    if len(theta) != len(g):
        raise ShapeError(
            "differentiable_step: parameter and gradient lists differ in length",
            details={"theta": len(theta), "g": len(g)},
        )
    stepped = []
    for param, gradient in zip(theta, g):
        if param.shape != gradient.shape:
            raise ShapeError(
                "differentiable_step: gradient shape does not match parameter",
                details={"name": param.name, "theta": list(param.shape), "g": list(gradient.shape)},
            )
        updated = add(param, scale(gradient, -alpha))
        updated.name = param.name
        stepped.append(updated)
    return stepped
