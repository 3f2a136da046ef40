"""
Primitive operations of the engine.

Each primitive provides ``check`` (shape validation), ``forward`` on raw numpy
arrays, and ``backward``, which maps the upstream gradient Tensor to one
gradient per input. Backward rules call other primitives through ``ops``, so
they are recorded like any forward computation when ``create_graph`` is set.
Several primitives exist only to be the backward of another one and come in
closed pairs, e.g. upsample2/sumpool2 and the three convolution forms.

Conventions: images are [B, C, H, W]; convolutions use odd square kernels with
zero padding k // 2; relu has zero second derivative; maxpool routes gradients
to the first maximum of each window.
"""

from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from metapix.core.errors import ShapeError
from metapix.autodiff import ops
from metapix.autodiff.graph import Node, register
from metapix.autodiff.tensor import Tensor, constant

Shape = Tuple[int, ...]


def _reject(kind: str, shapes: Sequence[Shape], reason: str) -> None:
    raise ShapeError(
        f"{kind}: {reason}",
        details={"primitive": kind, "shapes": [list(s) for s in shapes]},
    )


def _wants(node: Node, position: int) -> bool:
    return node.parents[position] is not None


def _reduce_like(g: Tensor, shape: Shape) -> Tensor:
    if g.shape == shape:
        return g
    return ops.sum(g)


class Primitive:
    name = ""
    arity: Optional[int] = 1
    # Piecewise primitives save a "mask" recording which branch each element took.
    branching = False

    def check(self, kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
        if self.arity is not None and len(shapes) != self.arity:
            _reject(kind, shapes, f"expects {self.arity} input(s), got {len(shapes)}")
        self.check_shapes(kind, shapes, **attrs)

    def check_shapes(self, kind: str, shapes: List[Shape], **attrs: Any) -> None:
        return None

    def forward(self, *arrays: np.ndarray, **attrs: Any) -> Tuple[np.ndarray, Dict[str, Any]]:
        raise NotImplementedError

    def backward(self, g: Tensor, node: Node) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError


def _check_image(kind: str, shapes: List[Shape], position: int = 0) -> Shape:
    shape = shapes[position]
    if len(shape) != 4:
        _reject(kind, shapes, f"input {position} must be [B, C, H, W]")
    return shape


# Elementwise arithmetic

@register("add")
class Add(Primitive):
    arity = 2

    def check_shapes(self, kind, shapes):
        a, b = shapes
        if a != b and a != () and b != ():
            _reject(kind, shapes, "operands must match or one must be a scalar")

    def forward(self, a, b):
        return a + b, {}

    def backward(self, g, node):
        a, b = node.inputs
        return (
            _reduce_like(g, a.shape) if _wants(node, 0) else None,
            _reduce_like(g, b.shape) if _wants(node, 1) else None,
        )


@register("mul")
class Mul(Primitive):
    arity = 2

    def check_shapes(self, kind, shapes):
        a, b = shapes
        if a != b and a != () and b != ():
            _reject(kind, shapes, "operands must match or one must be a scalar")

    def forward(self, a, b):
        return a * b, {}

    def backward(self, g, node):
        a, b = node.inputs
        return (
            _reduce_like(ops.mul(g, b), a.shape) if _wants(node, 0) else None,
            _reduce_like(ops.mul(g, a), b.shape) if _wants(node, 1) else None,
        )


@register("scale")
class Scale(Primitive):
    def forward(self, x, factor):
        return x * x.dtype.type(factor), {}

    def backward(self, g, node):
        return (ops.scale(g, node.attrs["factor"]),)


@register("shift")
class Shift(Primitive):
    def forward(self, x, offset):
        return x + x.dtype.type(offset), {}

    def backward(self, g, node):
        return (g,)


@register("exp")
class Exp(Primitive):
    def forward(self, x):
        return np.exp(x), {}

    def backward(self, g, node):
        return (ops.mul(g, node.output),)


@register("sigmoid")
class Sigmoid(Primitive):
    def forward(self, x):
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        e = np.exp(x[~positive])
        out[~positive] = e / (1.0 + e)
        return out, {}

    def backward(self, g, node):
        y = node.output
        return (ops.mul(g, ops.mul(y, ops.shift(ops.neg(y), 1.0))),)


@register("relu")
class Relu(Primitive):
    branching = True

    def forward(self, x):
        return np.maximum(x, 0), {"mask": (x > 0).astype(x.dtype)}

    def backward(self, g, node):
        return (ops.mul(g, constant(node.saved["mask"])),)


# Reductions and broadcasts

@register("sum")
class Sum(Primitive):
    def forward(self, x):
        return np.asarray(x.sum(), dtype=x.dtype), {}

    def backward(self, g, node):
        return (ops.fill(g, node.inputs[0].shape),)


@register("fill")
class Fill(Primitive):
    def check_shapes(self, kind, shapes, shape):
        if shapes[0] != ():
            _reject(kind, shapes, "fill broadcasts a scalar")

    def forward(self, x, shape):
        return np.full(shape, x, dtype=x.dtype), {}

    def backward(self, g, node):
        return (ops.sum(g),)


@register("sum_channels")
class SumChannels(Primitive):
    def check_shapes(self, kind, shapes):
        _check_image(kind, shapes)

    def forward(self, x):
        return x.sum(axis=1, keepdims=True), {}

    def backward(self, g, node):
        return (ops.expand_channels(g, node.inputs[0].shape[1]),)


@register("expand_channels")
class ExpandChannels(Primitive):
    def check_shapes(self, kind, shapes, channels):
        shape = _check_image(kind, shapes)
        if shape[1] != 1:
            _reject(kind, shapes, "expand_channels needs a single-channel input")

    def forward(self, x, channels):
        return np.repeat(x, channels, axis=1), {}

    def backward(self, g, node):
        return (ops.sum_channels(g),)


@register("broadcast_bias")
class BroadcastBias(Primitive):
    def check_shapes(self, kind, shapes, shape):
        if len(shapes[0]) != 1 or len(shape) != 4 or shape[1] != shapes[0][0]:
            _reject(kind, list(shapes) + [tuple(shape)], "bias [C] must match channel axis of target shape")

    def forward(self, b, shape):
        return np.ascontiguousarray(np.broadcast_to(b[None, :, None, None], shape)), {}

    def backward(self, g, node):
        return (ops.reduce_bias(g),)


@register("reduce_bias")
class ReduceBias(Primitive):
    def check_shapes(self, kind, shapes):
        _check_image(kind, shapes)

    def forward(self, x):
        return x.sum(axis=(0, 2, 3)), {}

    def backward(self, g, node):
        return (ops.broadcast_bias(g, node.inputs[0].shape),)


# Classification helpers

@register("log_softmax")
class LogSoftmax(Primitive):
    def check_shapes(self, kind, shapes):
        _check_image(kind, shapes)

    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True)), {}

    def backward(self, g, node):
        y = node.output
        total = ops.expand_channels(ops.sum_channels(g), y.shape[1])
        return (ops.sub(g, ops.mul(ops.exp(y), total)),)


@register("gather")
class Gather(Primitive):
    """Select one channel per pixel; indices outside [0, C) yield 0."""

    def check_shapes(self, kind, shapes, index):
        shape = _check_image(kind, shapes)
        if tuple(index.shape) != (shape[0], shape[2], shape[3]):
            _reject(kind, shapes + [tuple(index.shape)], "index must be [B, H, W]")

    def forward(self, x, index):
        channels = x.shape[1]
        valid = (index >= 0) & (index < channels)
        safe = np.where(valid, index, 0)
        picked = np.take_along_axis(x, safe[:, None], axis=1)
        onehot = (np.arange(channels)[None, :, None, None] == safe[:, None]) & valid[:, None]
        return np.where(valid[:, None], picked, 0).astype(x.dtype), {"onehot": onehot.astype(x.dtype)}

    def backward(self, g, node):
        channels = node.inputs[0].shape[1]
        return (ops.mul(ops.expand_channels(g, channels), constant(node.saved["onehot"])),)


# Convolutions. conv2d, conv2d_input_grad and conv2d_weight_grad are bilinear and
# each one's partial derivatives are the other two.

def _conv_geometry(kind, shapes, x_shape, w_shape, stride):
    if len(x_shape) != 4 or len(w_shape) != 4:
        _reject(kind, shapes, "conv operands must be [B, C, H, W] and [Co, Ci, k, k]")
    k = w_shape[2]
    if w_shape[3] != k or k % 2 == 0:
        _reject(kind, shapes, "kernel must be square with odd size")
    if x_shape[1] != w_shape[1]:
        _reject(kind, shapes, f"input has {x_shape[1]} channels, kernel expects {w_shape[1]}")
    if stride not in (1, 2):
        _reject(kind, shapes, f"unsupported stride {stride}")
    pad = k // 2
    out_h = (x_shape[2] + 2 * pad - k) // stride + 1
    out_w = (x_shape[3] + 2 * pad - k) // stride + 1
    return pad, out_h, out_w


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    out = np.tensordot(_windows(x, w.shape[2], stride), w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(gy: np.ndarray, w: np.ndarray, stride: int, input_shape: Shape) -> np.ndarray:
    k = w.shape[2]
    pad = k // 2
    batch, _, out_h, out_w = gy.shape
    height, width = input_shape[2], input_shape[3]
    padded = np.zeros((batch, w.shape[1], height + 2 * pad, width + 2 * pad), dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contrib.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(padded[:, :, pad:pad + height, pad:pad + width])


def _conv_weight_grad(x: np.ndarray, gy: np.ndarray, stride: int, kernel: int) -> np.ndarray:
    return np.ascontiguousarray(
        np.tensordot(gy, _windows(x, kernel, stride), axes=([0, 2, 3], [0, 2, 3]))
    )


@register("conv2d")
class Conv2d(Primitive):
    arity = 2

    def check_shapes(self, kind, shapes, stride=1):
        _conv_geometry(kind, shapes, shapes[0], shapes[1], stride)

    def forward(self, x, w, stride=1):
        return _conv(x, w, stride), {}

    def backward(self, g, node):
        x, w = node.inputs
        stride = node.attrs.get("stride", 1)
        return (
            ops.conv2d_input_grad(g, w, x.shape, stride=stride) if _wants(node, 0) else None,
            ops.conv2d_weight_grad(x, g, w.shape[2], stride=stride) if _wants(node, 1) else None,
        )


@register("conv2d_input_grad")
class Conv2dInputGrad(Primitive):
    arity = 2

    def check_shapes(self, kind, shapes, input_shape, stride=1):
        gy, w = shapes
        _, out_h, out_w = _conv_geometry(
            kind, shapes, (input_shape[0], w[1], input_shape[2], input_shape[3]), w, stride
        )
        if len(gy) != 4 or gy != (input_shape[0], w[0], out_h, out_w):
            _reject(kind, shapes, "upstream gradient does not match the convolution output")

    def forward(self, gy, w, input_shape, stride=1):
        return _conv_input_grad(gy, w, stride, tuple(input_shape)), {}

    def backward(self, g, node):
        gy, w = node.inputs
        stride = node.attrs.get("stride", 1)
        return (
            ops.conv2d(g, w, stride=stride) if _wants(node, 0) else None,
            ops.conv2d_weight_grad(g, gy, w.shape[2], stride=stride) if _wants(node, 1) else None,
        )


@register("conv2d_weight_grad")
class Conv2dWeightGrad(Primitive):
    arity = 2

    def check_shapes(self, kind, shapes, kernel, stride=1):
        x, gy = shapes
        if len(x) != 4 or len(gy) != 4:
            _reject(kind, shapes, "operands must be [B, C, H, W]")
        _, out_h, out_w = _conv_geometry(kind, shapes, x, (gy[1], x[1], kernel, kernel), stride)
        if gy[0] != x[0] or gy[2:] != (out_h, out_w):
            _reject(kind, shapes, "upstream gradient does not match the convolution output")

    def forward(self, x, gy, kernel, stride=1):
        return _conv_weight_grad(x, gy, stride, kernel), {}

    def backward(self, g, node):
        x, gy = node.inputs
        stride = node.attrs.get("stride", 1)
        return (
            ops.conv2d_input_grad(gy, g, x.shape, stride=stride) if _wants(node, 0) else None,
            ops.conv2d(x, g, stride=stride) if _wants(node, 1) else None,
        )


# Resampling

def _check_even(kind, shapes):
    shape = _check_image(kind, shapes)
    if shape[2] % 2 or shape[3] % 2:
        _reject(kind, shapes, "spatial extents must be even")
    return shape


@register("maxpool2")
class MaxPool2(Primitive):
    branching = True

    def check_shapes(self, kind, shapes):
        _check_even(kind, shapes)

    def forward(self, x):
        b, c, h, w = x.shape
        windows = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
        arg = windows.argmax(axis=-1)[..., None]
        pooled = np.take_along_axis(windows, arg, axis=-1)[..., 0]
        mask = np.zeros_like(windows)
        np.put_along_axis(mask, arg, 1, axis=-1)
        mask = mask.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return np.ascontiguousarray(pooled), {"mask": mask}

    def backward(self, g, node):
        return (ops.mul(ops.upsample2(g), constant(node.saved["mask"])),)


@register("upsample2")
class Upsample2(Primitive):
    def check_shapes(self, kind, shapes):
        _check_image(kind, shapes)

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3), {}

    def backward(self, g, node):
        return (ops.sumpool2(g),)


@register("sumpool2")
class SumPool2(Primitive):
    def check_shapes(self, kind, shapes):
        _check_even(kind, shapes)

    def forward(self, x):
        b, c, h, w = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), {}

    def backward(self, g, node):
        return (ops.upsample2(g),)


# Channel bookkeeping

@register("concat")
class Concat(Primitive):
    arity = None

    def check_shapes(self, kind, shapes):
        if not shapes:
            _reject(kind, shapes, "nothing to concatenate")
        for position in range(len(shapes)):
            _check_image(kind, shapes, position)
        first = shapes[0]
        for shape in shapes[1:]:
            if shape[0] != first[0] or shape[2:] != first[2:]:
                _reject(kind, shapes, "batch and spatial extents must agree")

    def forward(self, *xs):
        return np.concatenate(xs, axis=1), {}

    def backward(self, g, node):
        grads = []
        start = 0
        for position, tensor in enumerate(node.inputs):
            stop = start + tensor.shape[1]
            grads.append(ops.slice_channels(g, start, stop) if _wants(node, position) else None)
            start = stop
        return tuple(grads)


@register("slice_channels")
class SliceChannels(Primitive):
    def check_shapes(self, kind, shapes, start, stop):
        shape = _check_image(kind, shapes)
        if not 0 <= start < stop <= shape[1]:
            _reject(kind, shapes, f"channel range [{start}, {stop}) out of bounds")

    def forward(self, x, start, stop):
        return np.ascontiguousarray(x[:, start:stop]), {}

    def backward(self, g, node):
        return (ops.pad_channels(g, node.attrs["start"], node.inputs[0].shape[1]),)


@register("pad_channels")
class PadChannels(Primitive):
    def check_shapes(self, kind, shapes, start, total):
        shape = _check_image(kind, shapes)
        if start < 0 or start + shape[1] > total:
            _reject(kind, shapes, f"cannot place {shape[1]} channels at {start} of {total}")

    def forward(self, x, start, total):
        b, c, h, w = x.shape
        out = np.zeros((b, total, h, w), dtype=x.dtype)
        out[:, start:start + c] = x
        return out, {}

    def backward(self, g, node):
        start = node.attrs["start"]
        return (ops.slice_channels(g, start, start + node.inputs[0].shape[1]),)
