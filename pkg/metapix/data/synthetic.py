"""
Synthetic two-domain segmentation benchmark.

Every image is a background (class 0) with a few coloured rectangles, disks and
bars, one class each, painted in a fixed class palette. The target domain is
the clean rendering with faint pixel noise. The source domain shifts colours by
a per-image affine jitter and adds blocky texture noise. A fraction rho of the
source images also get one rectangle of labels replaced by uniformly random
class ids; the image is left as is. The generator records where it did that in
a corruption mask, which only evaluation reads.

Each sample draws from its own seeded stream, so any single sample can be
re-rendered without generating the rest.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from loguru import logger
from PIL import Image

from metapix.core.errors import DataError
from metapix.schemas import DatasetSpec, Manifest, ManifestEntry
from metapix.schemas.dataset import SPLIT_DOMAINS

SPLITS = ("source", "target_train", "target_val")
_SPLIT_CODES = {"source": 0, "target_train": 1, "target_val": 2}
_CORRUPTION_STREAM = 7
_TEXTURE_BLOCK = 4

MASK_DIR = Path("meta") / "corruption_masks"
MANIFEST_NAME = "manifest.json"

_BASE_PALETTE = [
    (20, 20, 20),
    (220, 60, 50),
    (60, 170, 70),
    (50, 90, 210),
    (230, 200, 40),
    (170, 70, 190),
    (40, 190, 200),
    (240, 140, 30),
]


@dataclass
class Sample:
    image: np.ndarray                  # uint8 [H, W, 3]
    label: np.ndarray                  # uint8 [H, W]
    mask: Optional[np.ndarray] = None  # uint8 [H, W], 255 where labels were corrupted


def palette(num_classes: int) -> np.ndarray:
    colours = list(_BASE_PALETTE[:num_classes])
    if num_classes > len(colours):
        rng = np.random.default_rng(num_classes)
        extra = rng.integers(0, 256, size=(num_classes - len(colours), 3))
        colours.extend(tuple(int(v) for v in row) for row in extra)
    return np.asarray(colours, dtype=np.float64) / 255.0


def split_size(spec: DatasetSpec, split: str) -> int:
    return {"source": spec.n_source, "target_train": spec.n_target_train, "target_val": spec.n_target_val}[split]


def corrupted_indices(spec: DatasetSpec) -> np.ndarray:
    """The first floor(rho * n) entries of a seeded permutation of the source indices."""
    count = int(np.floor(spec.corruption_rho * spec.n_source))
    order = np.random.default_rng([spec.seed, _CORRUPTION_STREAM]).permutation(spec.n_source)
    return np.sort(order[:count])


def _paint_shapes(rng: np.random.Generator, spec: DatasetSpec) -> np.ndarray:
    size = spec.image_size
    label = np.zeros((size, size), dtype=np.uint8)
    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        kind = int(rng.integers(0, 3))
        if kind == 0:
            h, w = rng.integers(size // 8, size // 2 + 1, size=2)
            top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            region = (rows >= top) & (rows < top + h) & (cols >= left) & (cols < left + w)
        elif kind == 1:
            radius = rng.integers(size // 10, size // 4 + 1)
            cy, cx = rng.integers(0, size, size=2)
            region = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        else:
            thickness = int(rng.integers(max(1, size // 16), size // 8 + 1))
            offset = int(rng.integers(0, size - thickness + 1))
            axis = rows if rng.random() < 0.5 else cols
            region = (axis >= offset) & (axis < offset + thickness)
        label[region] = cls
    return label


def _shift_domain(rng: np.random.Generator, spec: DatasetSpec, image: np.ndarray) -> np.ndarray:
    jitter = spec.color_jitter
    gain = 1.0 + rng.uniform(-jitter, jitter, size=3)
    bias = rng.uniform(-jitter / 2, jitter / 2, size=3)
    image = image * gain + bias
    coarse = spec.image_size // _TEXTURE_BLOCK
    texture = rng.normal(0.0, spec.texture_sigma, size=(coarse, coarse, 3))
    texture = np.kron(texture, np.ones((_TEXTURE_BLOCK, _TEXTURE_BLOCK, 1)))
    return image + texture


def _corrupt(rng: np.random.Generator, spec: DatasetSpec, label: np.ndarray) -> np.ndarray:
    size = spec.image_size
    area = rng.uniform(spec.corruption_min_area, spec.corruption_max_area) * size * size
    aspect = rng.uniform(0.5, 2.0)
    h = int(np.clip(np.round(np.sqrt(area * aspect)), 1, size))
    w = int(np.clip(np.round(area / h), 1, size))
    top, left = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
    label[top:top + h, left:left + w] = rng.integers(0, spec.num_classes, size=(h, w))
    mask = np.zeros_like(label)
    mask[top:top + h, left:left + w] = 255
    return mask


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_sample(spec: DatasetSpec, split: str, index: int,
                  corrupted: Optional[np.ndarray] = None) -> Sample:
    """Render one sample of ``split`` exactly as ``generate`` writes it."""
    if split not in _SPLIT_CODES:
        raise DataError(f"Unknown split '{split}'", details={"split": split})
    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], index])
    label = _paint_shapes(rng, spec)
    image = palette(spec.num_classes)[label]

    if split != "source":
        image = image + rng.normal(0.0, spec.target_noise, size=image.shape)
        return Sample(_quantize(image), label)

    image = _shift_domain(rng, spec, image)
    if corrupted is None:
        corrupted = corrupted_indices(spec)
    if index in corrupted:
        mask = _corrupt(np.random.default_rng([spec.seed, _SPLIT_CODES[split], index, 1]), spec, label)
    else:
        mask = np.zeros_like(label)
    return Sample(_quantize(image), label, mask)


def _save_png(array: np.ndarray, path: Path, mode: str) -> None:
    try:
        Image.fromarray(array).convert(mode).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"Could not write {path}: {exc}", details={"path": str(path)}) from exc


def generate(spec: DatasetSpec, out_dir: Path) -> Manifest:
    """Write every split, the corruption masks and ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        for split in SPLITS:
            (out_dir / split / "images").mkdir(parents=True, exist_ok=True)
            (out_dir / split / "labels").mkdir(parents=True, exist_ok=True)
        (out_dir / MASK_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"Cannot create dataset directory {out_dir}: {exc}", details={"path": str(out_dir)}) from exc

    corrupted = corrupted_indices(spec)
    entries: List[ManifestEntry] = []
    counts: Dict[str, int] = {}
    for split in SPLITS:
        n = split_size(spec, split)
        counts[split] = n
        for index in range(n):
            sample = render_sample(spec, split, index, corrupted)
            name = f"{index:06d}.png"
            image_path = Path(split) / "images" / name
            label_path = Path(split) / "labels" / name
            _save_png(sample.image, out_dir / image_path, "RGB")
            _save_png(sample.label, out_dir / label_path, "L")
            mask_path = None
            if sample.mask is not None:
                mask_path = MASK_DIR / name
                _save_png(sample.mask, out_dir / mask_path, "L")
            entries.append(
                ManifestEntry(
                    index=index,
                    split=split,
                    domain=SPLIT_DOMAINS[split],
                    image=image_path.as_posix(),
                    label=label_path.as_posix(),
                    corruption_mask=mask_path.as_posix() if mask_path else None,
                )
            )

    manifest = Manifest(spec=spec, seed=spec.seed, entries=entries)
    text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
    try:
        (out_dir / MANIFEST_NAME).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"Could not write manifest: {exc}", details={"path": str(out_dir)}) from exc

    logger.bind(payload={"counts": counts, "corrupted": int(len(corrupted))}).info(
        f"Synthetic dataset written to {out_dir}"
    )
    return manifest
