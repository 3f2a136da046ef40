"""MetaPix: meta-learned per-pixel weighting of a source domain's segmentation loss."""

__version__ = "1.0.0"
