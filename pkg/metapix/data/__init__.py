from metapix.data.loader import Batch, BatchSampler, Dataset, load_batch
from metapix.data.synthetic import SPLITS, Sample, corrupted_indices, generate, palette, render_sample

__all__ = [
    "SPLITS",
    "Batch",
    "BatchSampler",
    "Dataset",
    "Sample",
    "corrupted_indices",
    "generate",
    "load_batch",
    "palette",
    "render_sample",
]
