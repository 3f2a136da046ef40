"""Reading a generated dataset back, and seeded batch sampling."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from metapix.core.errors import DataError
from metapix.autodiff import Tensor, constant, get_default_dtype
from metapix.data.synthetic import MANIFEST_NAME
from metapix.losses import validate_labels
from metapix.schemas import IGNORE_ID, Manifest, ManifestEntry
from metapix.schemas.dataset import SPLIT_DOMAINS


@dataclass
class Batch:
    """
    Images [B, 3, H, W] in [0, 1] and integer labels [B, H, W].

    Corruption masks are not carried; training never sees them.
    """
    image: Tensor
    label: np.ndarray
    domain: str
    indices: List[int]

    @property
    def size(self) -> int:
        return len(self.indices)


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as handle:
            if handle.mode != mode:
                raise DataError(
                    f"{path} has image mode {handle.mode}, expected {mode}",
                    details={"path": str(path), "mode": handle.mode},
                )
            return np.array(handle)
    except FileNotFoundError as exc:
        raise DataError(f"Missing dataset file {path}", details={"path": str(path)}) from exc
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"Corrupt dataset file {path}: {exc}", details={"path": str(path)}) from exc


class Dataset:
    """
    A generated dataset on disk, described by its manifest.

    Decoded images and labels are cached per entry; images are converted to
    the default dtype when a batch is assembled.
    """

    def __init__(self, root: Path, manifest: Manifest, ignore_id: int = IGNORE_ID, cache: bool = True):
        self.root = Path(root)
        self.manifest = manifest
        self.ignore_id = ignore_id
        self.cache = cache
        self._splits: Dict[str, List[ManifestEntry]] = {
            split: sorted(manifest.split(split), key=lambda e: e.index) for split in SPLIT_DOMAINS
        }
        self._images: Dict[Tuple[str, int], np.ndarray] = {}
        self._labels: Dict[Tuple[str, int], np.ndarray] = {}

    @classmethod
    def open(cls, root: Path, ignore_id: int = IGNORE_ID, cache: bool = True) -> "Dataset":
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            manifest = Manifest.model_validate_json(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(
                f"No dataset at {root}: {MANIFEST_NAME} not found (run generate-data first)",
                details={"path": str(path)},
            ) from exc
        except ValidationError as exc:
            raise DataError(f"Corrupt manifest {path}", details={"path": str(path)}) from exc
        return cls(root, manifest, ignore_id=ignore_id, cache=cache)

    @property
    def num_classes(self) -> int:
        return self.manifest.spec.num_classes

    def size(self, split: str) -> int:
        return len(self.entries(split))

    def entries(self, split: str) -> List[ManifestEntry]:
        if split not in self._splits:
            raise DataError(f"Unknown split '{split}'", details={"split": split})
        return self._splits[split]

    def entry(self, split: str, index: int) -> ManifestEntry:
        entries = self.entries(split)
        if not 0 <= index < len(entries):
            raise DataError(
                f"Index {index} out of range for split '{split}' ({len(entries)} entries)",
                details={"split": split, "index": index},
            )
        return entries[index]

    def read_rgb(self, split: str, index: int) -> np.ndarray:
        """uint8 [H, W, 3] exactly as stored."""
        key = (split, index)
        if key in self._images:
            return self._images[key]
        image = _read_png(self.root / self.entry(split, index).image, "RGB")
        if self.cache:
            self._images[key] = image
        return image

    def read_label(self, split: str, index: int) -> np.ndarray:
        """int64 [H, W] class ids, validated against the class count."""
        key = (split, index)
        if key in self._labels:
            return self._labels[key]
        path = self.root / self.entry(split, index).label
        label = _read_png(path, "L").astype(np.int64)
        try:
            validate_labels(label[None], self.num_classes, self.ignore_id)
        except DataError as exc:
            raise DataError(f"{path}: {exc.message}", details={**exc.details, "path": str(path)}) from exc
        if self.cache:
            self._labels[key] = label
        return label

    def read_mask(self, split: str, index: int) -> Optional[np.ndarray]:
        """Generator corruption mask as booleans, or None when absent. Evaluation only."""
        relative = self.entry(split, index).corruption_mask
        if relative is None or not (self.root / relative).exists():
            return None
        return _read_png(self.root / relative, "L") > 0

    def load_batch(self, split: str, indices: Sequence[int]) -> Batch:
        dtype = get_default_dtype()
        images = np.stack([self.read_rgb(split, i) for i in indices]).transpose(0, 3, 1, 2)
        labels = np.stack([self.read_label(split, i) for i in indices])
        image = constant(images.astype(dtype) / dtype(255))
        return Batch(image=image, label=labels, domain=SPLIT_DOMAINS[split], indices=list(indices))


def load_batch(dataset: Dataset, split: str, index: int, batch_size: int = 1) -> Batch:
    """``batch_size`` consecutive entries of ``split`` starting at ``index``, wrapping around."""
    n = dataset.size(split)
    return dataset.load_batch(split, [(index + k) % n for k in range(batch_size)])


class BatchSampler:
    """
    Seeded epoch permutations over one split.

    Each sampler owns an independent stream derived from ``(seed, stream)``;
    its full state (generator state, current permutation and position) can be
    saved and restored for exact resumption.
    """

    def __init__(self, size: int, batch_size: int, seed: int, stream: int):
        if size < 1:
            raise DataError("Cannot sample from an empty split", details={"stream": stream})
        self.size = size
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
        self.order: Optional[np.ndarray] = None
        self.position = 0
        self.epoch = 0

    def _next_index(self) -> int:
        if self.order is None or self.position >= self.size:
            if self.order is not None:
                self.epoch += 1
            self.order = self.rng.permutation(self.size)
            self.position = 0
        index = int(self.order[self.position])
        self.position += 1
        return index

    def next(self) -> List[int]:
        return [self._next_index() for _ in range(self.batch_size)]

    def state(self) -> dict:
        return {
            "rng": json.dumps(self.rng.bit_generator.state, sort_keys=True),
            "order": None if self.order is None else [int(i) for i in self.order],
            "position": self.position,
            "epoch": self.epoch,
        }

    def load_state(self, state: dict) -> None:
        self.rng.bit_generator.state = json.loads(state["rng"])
        self.order = None if state["order"] is None else np.asarray(state["order"], dtype=np.int64)
        self.position = int(state["position"])
        self.epoch = int(state["epoch"])
