"""
Segmentation network with per-domain heads.

FCN-8 topology at reduced width: five encoder blocks (conv-relu x2, maxpool),
a score conv on block 5, and two x2 upsample stages fused with score convs on
blocks 4 and 3, followed by three nearest-neighbour x2 upsample + conv stages
back to full resolution.

With ``split_at = k`` blocks 1..k exist once per domain (``source.*`` and
``target.*``) and blocks k+1..5 plus the decoder are ``shared.*``. At k = 5
the decoder is duplicated too, so nothing is shared between domains.
"""

from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from metapix.core.errors import ConfigError, ShapeError
from metapix.autodiff import Tensor, ops
from metapix.nn.layers import Network, add_conv, conv, conv_relu

DOMAINS = ("source", "target")
NUM_BLOCKS = 5
DIVISOR = 2 ** NUM_BLOCKS
DECODER_STAGES = ("up2", "up1", "out")


class SegNet(Network):
    def __init__(self, num_classes: int, split_at: int, widths: Sequence[int]):
        super().__init__()
        self.num_classes = num_classes
        self.split_at = split_at
        self.widths = list(widths)

    def block_prefix(self, block: int, domain: str) -> str:
        return f"{domain}.block{block}" if block <= self.split_at else f"shared.block{block}"

    def decoder_prefix(self, domain: str) -> str:
        return f"{domain}.decoder" if self.split_at == NUM_BLOCKS else "shared.decoder"

    def domain_parameters(self, domain: str) -> Dict[str, Tensor]:
        """Parameters a forward pass for ``domain`` touches: its head plus shared ones."""
        if domain not in DOMAINS:
            raise ConfigError(f"Unknown domain '{domain}'", details={"domain": domain})
        other = "target" if domain == "source" else "source"
        return {name: t for name, t in self.params.items() if not name.startswith(other + ".")}

    def head_parameters(self, domain: str) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if name.startswith(domain + ".")}

    def shared_parameters(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if name.startswith("shared.")}

    def architecture(self) -> dict:
        return {"num_classes": self.num_classes, "split_at": self.split_at, "widths": self.widths}


def _owners(prefix: str, per_domain: bool) -> List[str]:
    return [f"{d}.{prefix}" for d in DOMAINS] if per_domain else [f"shared.{prefix}"]


def build_seg_net(num_classes: int, split_at: int = 1, widths: Sequence[int] = (8, 16, 32, 32, 32),
                  seed: int = 0) -> SegNet:
    """
    Build a segmentation network with deterministic Kaiming-uniform weights
    and zero biases. Per-domain copies start out identical.
    """
    if not 0 <= split_at <= NUM_BLOCKS:
        raise ConfigError(f"split_at must lie in [0, {NUM_BLOCKS}], got {split_at}", details={"split_at": split_at})
    if len(widths) != NUM_BLOCKS:
        raise ConfigError(f"widths needs {NUM_BLOCKS} entries", details={"widths": list(widths)})

    net = SegNet(num_classes, split_at, widths)
    rng = np.random.default_rng(seed)
    c_in = 3
    for block, width in enumerate(widths, start=1):
        per_domain = block <= split_at
        add_conv(net, rng, _owners(f"block{block}.conv1", per_domain), c_in, width)
        add_conv(net, rng, _owners(f"block{block}.conv2", per_domain), width, width)
        c_in = width

    per_domain = split_at == NUM_BLOCKS
    c = num_classes
    add_conv(net, rng, _owners("decoder.score5", per_domain), widths[4], c)
    add_conv(net, rng, _owners("decoder.score4", per_domain), widths[3], c)
    add_conv(net, rng, _owners("decoder.score3", per_domain), widths[2], c)
    add_conv(net, rng, _owners("decoder.up4", per_domain), c, c)
    add_conv(net, rng, _owners("decoder.up3", per_domain), c, c)
    for stage in DECODER_STAGES:
        add_conv(net, rng, _owners(f"decoder.{stage}", per_domain), c, c)
    return net


def seg_forward(net: SegNet, image: Tensor, domain: str,
                params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Logits [B, C, H, W] for images [B, 3, H, W] through ``domain``'s head.

    ``params`` overrides parameters by name, e.g. with stepped copies inside a
    meta step; the network's own tensors are never modified.
    """
    if domain not in DOMAINS:
        raise ConfigError(f"Unknown domain '{domain}'", details={"domain": domain})
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError("seg_forward expects images shaped [B, 3, H, W]", details={"shape": list(image.shape)})
    height, width = image.shape[2:]
    if height % DIVISOR or width % DIVISOR:
        raise ShapeError(
            f"Image height and width must be divisible by {DIVISOR}, got {height}x{width}",
            details={"shape": list(image.shape), "divisor": DIVISOR},
        )

    x = image
    features = {}
    for block in range(1, NUM_BLOCKS + 1):
        prefix = net.block_prefix(block, domain)
        x = conv_relu(net, f"{prefix}.conv1", x, params)
        x = conv_relu(net, f"{prefix}.conv2", x, params)
        x = ops.maxpool2(x)
        features[block] = x

    dec = net.decoder_prefix(domain)
    score = conv(net, f"{dec}.score5", features[5], params)
    score = ops.add(conv(net, f"{dec}.up4", ops.upsample2(score), params),
                    conv(net, f"{dec}.score4", features[4], params))
    score = ops.add(conv(net, f"{dec}.up3", ops.upsample2(score), params),
                    conv(net, f"{dec}.score3", features[3], params))
    for stage in DECODER_STAGES:
        score = conv(net, f"{dec}.{stage}", ops.upsample2(score), params)
    return score
