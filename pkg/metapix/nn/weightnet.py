"""
Pixel weighting network.

U-Net with three down and three up stages. Input is the image concatenated
with the one-hot label (3 + C channels); output is a sigmoid weight map with
one channel (mode ``single``) or one channel per class (mode ``per_class``).
The head starts at zero, so every initial weight is exactly 0.5.

The sigmoid is squeezed into [MARGIN, 1 - MARGIN]: in float32 it rounds to
exactly 0 or 1 for large logits, and weights must stay strictly inside (0, 1).
MARGIN is a power of two, so 0.5 maps to 0.5 exactly.
"""

from typing import Mapping, Optional, Sequence

import numpy as np

from metapix.core.errors import ConfigError, ShapeError
from metapix.autodiff import Tensor, constant, ops
from metapix.nn.layers import Network, add_conv, conv, conv_relu

WEIGHT_MODES = ("single", "per_class")
DIVISOR = 8
MARGIN = 2.0 ** -20


class WeightNet(Network):
    def __init__(self, num_classes: int, widths: Sequence[int], mode: str):
        super().__init__()
        if mode not in WEIGHT_MODES:
            raise ConfigError(f"Unknown weight mode '{mode}'", details={"mode": mode})
        self.num_classes = num_classes
        self.widths = list(widths)
        self.mode = mode
        # When set, the network emits this constant instead of running.
        self.clamp: Optional[float] = None

    @property
    def out_channels(self) -> int:
        return 1 if self.mode == "single" else self.num_classes

    def clamp_to(self, value: Optional[float]) -> "WeightNet":
        """Force every output weight to ``value`` (None restores the network)."""
        self.clamp = value
        return self

    def architecture(self) -> dict:
        return {"num_classes": self.num_classes, "widths": self.widths, "mode": self.mode}


def build_weight_net(num_classes: int, widths: Sequence[int] = (8, 16, 32, 32), mode: str = "single",
                     seed: int = 0, zero_head: bool = True) -> WeightNet:
    if len(widths) != 4:
        raise ConfigError("WeightNet widths needs 4 entries", details={"widths": list(widths)})
    net = WeightNet(num_classes, widths, mode)
    rng = np.random.default_rng(seed)
    w1, w2, w3, w4 = widths
    add_conv(net, rng, ["enc1"], 3 + num_classes, w1)
    add_conv(net, rng, ["enc2"], w1, w2)
    add_conv(net, rng, ["enc3"], w2, w3)
    add_conv(net, rng, ["bottleneck"], w3, w4)
    add_conv(net, rng, ["dec3"], w4 + w3, w3)
    add_conv(net, rng, ["dec2"], w3 + w2, w2)
    add_conv(net, rng, ["dec1"], w2 + w1, w1)
    add_conv(net, rng, ["head"], w1, net.out_channels, zero=zero_head)
    return net


def expand_head(net: WeightNet) -> WeightNet:
    """A per-class copy of a single-channel net whose head is the single head tiled C times."""
    if net.mode != "single":
        raise ConfigError("expand_head needs a single-channel weighting network")
    wide = WeightNet(net.num_classes, net.widths, "per_class")
    for name, tensor in net.params.items():
        values = tensor.values
        if name.startswith("head."):
            reps = (net.num_classes,) + (1,) * (values.ndim - 1)
            values = np.tile(values, reps)
        wide.add_param(name, values.copy())
    return wide


def weight_forward(net: WeightNet, image: Tensor, label_onehot: Tensor,
                   params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Weight map [B, m, H, W] in (0, 1) for images and one-hot labels."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError("weight_forward expects images shaped [B, 3, H, W]", details={"shape": list(image.shape)})
    if label_onehot.ndim != 4 or label_onehot.shape[1] != net.num_classes:
        raise ShapeError(
            f"One-hot label has {label_onehot.shape[1] if label_onehot.ndim == 4 else '?'} channels, "
            f"weighting network is configured for {net.num_classes}",
            details={"shape": list(label_onehot.shape), "num_classes": net.num_classes},
        )
    if label_onehot.shape[0] != image.shape[0] or label_onehot.shape[2:] != image.shape[2:]:
        raise ShapeError(
            "Image and one-hot label disagree in batch or spatial extent",
            details={"image": list(image.shape), "label": list(label_onehot.shape)},
        )
    height, width = image.shape[2:]
    if height % DIVISOR or width % DIVISOR:
        raise ShapeError(
            f"Image height and width must be divisible by {DIVISOR}, got {height}x{width}",
            details={"shape": list(image.shape), "divisor": DIVISOR},
        )

    if net.clamp is not None:
        shape = (image.shape[0], net.out_channels, height, width)
        return constant(np.full(shape, net.clamp, dtype=image.dtype))

    x = ops.concat([image, label_onehot])
    e1 = conv_relu(net, "enc1", x, params)
    e2 = conv_relu(net, "enc2", ops.maxpool2(e1), params)
    e3 = conv_relu(net, "enc3", ops.maxpool2(e2), params)
    bottom = conv_relu(net, "bottleneck", ops.maxpool2(e3), params)
    d3 = conv_relu(net, "dec3", ops.concat([ops.upsample2(bottom), e3]), params)
    d2 = conv_relu(net, "dec2", ops.concat([ops.upsample2(d3), e2]), params)
    d1 = conv_relu(net, "dec1", ops.concat([ops.upsample2(d2), e1]), params)
    squashed = ops.sigmoid(conv(net, "head", d1, params))
    return ops.shift(ops.scale(squashed, 1.0 - 2.0 * MARGIN), MARGIN)
