import json

import numpy as np
import pytest
from PIL import Image

from metapix.core.errors import DataError
from metapix.data import BatchSampler, Dataset, corrupted_indices, generate, load_batch, palette, render_sample
from metapix.data.synthetic import MANIFEST_NAME
from metapix.schemas import DatasetSpec


def test_split_sizes_and_manifest(tiny_data, tiny_spec):
    assert tiny_data.size("source") == tiny_spec.n_source
    assert tiny_data.size("target_train") == tiny_spec.n_target_train
    assert tiny_data.size("target_val") == tiny_spec.n_target_val
    assert tiny_data.num_classes == 3
    assert all(e.corruption_mask is None for e in tiny_data.entries("target_train"))


def test_generation_is_deterministic(tmp_path, tiny_spec, tiny_root):
    generate(tiny_spec, tmp_path)
    assert (tmp_path / MANIFEST_NAME).read_bytes() == (tiny_root / MANIFEST_NAME).read_bytes()
    manifest = json.loads((tiny_root / MANIFEST_NAME).read_text())
    for entry in manifest["entries"][:6] + manifest["entries"][-3:]:
        for key in ("image", "label"):
            assert (tmp_path / entry[key]).read_bytes() == (tiny_root / entry[key]).read_bytes()


def test_corruption_affects_exactly_the_chosen_fraction(tiny_data, tiny_spec):
    chosen = corrupted_indices(tiny_spec)
    assert len(chosen) == int(np.floor(tiny_spec.corruption_rho * tiny_spec.n_source))
    for index in range(tiny_spec.n_source):
        mask = tiny_data.read_mask("source", index)
        assert mask is not None
        assert mask.any() == (index in chosen)


def test_corruption_only_changes_labels_inside_the_mask(tiny_spec):
    index = int(corrupted_indices(tiny_spec)[0])
    corrupted = render_sample(tiny_spec, "source", index)
    clean = render_sample(tiny_spec, "source", index, corrupted=np.array([], dtype=np.int64))
    inside = corrupted.mask > 0
    np.testing.assert_array_equal(corrupted.image, clean.image)
    np.testing.assert_array_equal(corrupted.label[~inside], clean.label[~inside])


def test_zero_corruption_fraction(tiny_spec):
    spec = tiny_spec.model_copy(update={"corruption_rho": 0.0})
    assert len(corrupted_indices(spec)) == 0


def test_palette_has_one_colour_per_class():
    colours = palette(12)
    assert colours.shape == (12, 3)
    assert len({tuple(c) for c in colours}) == 12


def test_batches_are_normalized_images(f64, tiny_data):
    batch = tiny_data.load_batch("source", [0, 3])
    assert batch.image.shape == (2, 3, 32, 32)
    assert batch.image.dtype == np.float64
    assert batch.label.shape == (2, 32, 32)
    assert batch.domain == "source"
    assert 0.0 <= batch.image.values.min() and batch.image.values.max() <= 1.0
    assert set(np.unique(batch.label)) <= {0, 1, 2}


def test_load_batch_wraps_around(tiny_data):
    batch = load_batch(tiny_data, "target_val", 3, batch_size=3)
    assert batch.indices == [3, 0, 1]


def test_missing_dataset_names_generate_data(tmp_path):
    with pytest.raises(DataError, match="generate-data"):
        Dataset.open(tmp_path)


def test_out_of_range_label_file_is_rejected(tmp_path, tiny_spec):
    spec = tiny_spec.model_copy(update={"n_source": 5, "n_target_train": 1, "n_target_val": 1})
    generate(spec, tmp_path)
    dataset = Dataset.open(tmp_path)
    path = tmp_path / dataset.entry("target_val", 0).label
    Image.fromarray(np.full((32, 32), 9, dtype=np.uint8)).save(path, format="PNG")
    with pytest.raises(DataError) as info:
        dataset.read_label("target_val", 0)
    assert str(path) in info.value.message


def test_missing_image_file(tmp_path, tiny_spec):
    spec = tiny_spec.model_copy(update={"n_source": 5, "n_target_train": 1, "n_target_val": 1})
    generate(spec, tmp_path)
    dataset = Dataset.open(tmp_path)
    (tmp_path / dataset.entry("source", 2).image).unlink()
    with pytest.raises(DataError, match="Missing"):
        dataset.read_rgb("source", 2)
    with pytest.raises(DataError):
        dataset.entry("source", 99)


def test_sampler_is_seeded_and_covers_each_epoch():
    a = BatchSampler(10, 1, seed=3, stream=11)
    b = BatchSampler(10, 1, seed=3, stream=11)
    first = [a.next()[0] for _ in range(10)]
    assert first == [b.next()[0] for _ in range(10)]
    assert sorted(first) == list(range(10))
    other = BatchSampler(10, 1, seed=3, stream=12)
    assert [other.next()[0] for _ in range(10)] != first


def test_sampler_state_round_trip():
    a = BatchSampler(7, 2, seed=0, stream=21)
    for _ in range(5):
        a.next()
    b = BatchSampler(7, 2, seed=0, stream=21)
    b.load_state(json.loads(json.dumps(a.state())))
    assert [a.next() for _ in range(10)] == [b.next() for _ in range(10)]


def test_empty_split_cannot_be_sampled():
    with pytest.raises(DataError):
        BatchSampler(0, 1, seed=0, stream=11)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(image_size=48)
    with pytest.raises(ValueError):
        DatasetSpec(n_source=10, n_target_train=5)
    with pytest.raises(ValueError):
        DatasetSpec(corruption_rho=1.5)
