"""Shapes generator and EDAI file format."""

import numpy as np
import pytest

from edgeai.data import (DatasetFormatError, ShapesConfig, gen_shapes, load_dataset,
                         random_noise_dataset, save_dataset, split_batches)


@pytest.fixture(scope="module")
def small_ds():
    return gen_shapes(ShapesConfig(num_classes=3, image_size=16, per_class=20,
                                   noise=0.05, seed=11))


class TestGenShapes:
    def test_counts_and_ranges(self, small_ds):
        assert len(small_ds) == 60
        assert small_ds.images.min() >= 0.0 and small_ds.images.max() <= 1.0
        assert set(small_ds.labels.tolist()) == {0, 1, 2}

    def test_deterministic_per_seed(self):
        cfg = ShapesConfig(num_classes=2, image_size=12, per_class=5, seed=9)
        a, b = gen_shapes(cfg), gen_shapes(cfg)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_noiseless_classes_separable_by_nearest_centroid(self):
        # independent oracle: nearest class-centroid classifier in pixel space
        ds = gen_shapes(ShapesConfig(num_classes=2, image_size=16, per_class=50,
                                     noise=0.0, seed=3, class_offset=6))
        flat = ds.images.reshape(len(ds), -1)
        centroids = np.stack([flat[ds.labels == c].mean(axis=0) for c in range(2)])
        d = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        acc = (d.argmin(axis=1) == ds.labels).mean()
        assert acc > 0.95

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="noise"):
            gen_shapes(ShapesConfig(noise=0.9))
        with pytest.raises(ValueError, match="motifs"):
            ShapesConfig(num_classes=11).validate()

    def test_alternate_bank_disjoint(self):
        primary = ShapesConfig(num_classes=10).motifs()
        alt = ShapesConfig(num_classes=10, motif_bank="alternate").motifs()
        assert not set(primary) & set(alt)

    def test_noise_dataset(self):
        ds = random_noise_dataset(10, 4, 8, seed=0)
        assert ds.images.shape == (10, 3, 8, 8)


class TestEdaiFormat:
    def test_round_trip_identity(self, small_ds, tmp_path):
        path = tmp_path / "ds.edai"
        save_dataset(small_ds, path)
        back = load_dataset(path)
        assert np.array_equal(back.images, small_ds.images)
        assert np.array_equal(back.labels, small_ds.labels)
        assert back.num_classes == small_ds.num_classes

    def test_bad_magic(self, small_ds, tmp_path):
        path = tmp_path / "ds.edai"
        save_dataset(small_ds, path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(path)

    def test_truncation(self, small_ds, tmp_path):
        path = tmp_path / "ds.edai"
        save_dataset(small_ds, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-100])
        with pytest.raises(DatasetFormatError, match="truncated"):
            load_dataset(path)

    def test_header_fuzz_rejected(self, small_ds, tmp_path):
        # flipping any single header byte must raise a typed error
        path = tmp_path / "ds.edai"
        save_dataset(small_ds, path)
        clean = path.read_bytes()
        header_len = 16
        for i in range(header_len):
            blob = bytearray(clean)
            blob[i] ^= 0x01
            path.write_bytes(bytes(blob))
            with pytest.raises(DatasetFormatError):
                load_dataset(path)

    def test_payload_corruption_caught_by_checksum(self, small_ds, tmp_path):
        path = tmp_path / "ds.edai"
        save_dataset(small_ds, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError, match="checksum"):
            load_dataset(path)


class TestSplitBatches:
    def test_single_batch_is_identity_content(self, small_ds):
        (imgs, labels), = split_batches(small_ds, len(small_ds), shuffle_seed=0)
        assert sorted(labels.tolist()) == sorted(small_ds.labels.tolist())
        assert imgs.shape == small_ds.images.shape

    def test_same_seed_same_order(self, small_ds):
        a = split_batches(small_ds, 7, shuffle_seed=5)
        b = split_batches(small_ds, 7, shuffle_seed=5)
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_sizes_sum_to_n(self, small_ds):
        batches = split_batches(small_ds, 7, shuffle_seed=1)
        assert sum(len(y) for _, y in batches) == len(small_ds)

    def test_batch_must_be_positive(self, small_ds):
        with pytest.raises(ValueError):
            split_batches(small_ds, 0, shuffle_seed=0)
