from metapix.nn.checkpoint import MAGIC, read_checkpoint, write_checkpoint
from metapix.nn.layers import Network, kaiming_uniform
from metapix.nn.optim import Adam
from metapix.nn.segnet import DOMAINS, SegNet, build_seg_net, seg_forward
from metapix.nn.weightnet import WeightNet, build_weight_net, expand_head, weight_forward

__all__ = [
    "DOMAINS",
    "MAGIC",
    "Adam",
    "Network",
    "SegNet",
    "WeightNet",
    "build_seg_net",
    "build_weight_net",
    "expand_head",
    "kaiming_uniform",
    "read_checkpoint",
    "seg_forward",
    "weight_forward",
    "write_checkpoint",
]
