"""Dataset formats, normalization, subsetting, synthetic generation."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbeval import data
from bbeval.exceptions import FormatError, ParameterError


def write_idx_pair(tmp_path, images, labels):
    n, h, w = images.shape
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x0803, n, h, w) + images.tobytes())
    lab_path.write_bytes(struct.pack(">II", 0x0801, n) + labels.tobytes())
    return img_path, lab_path


class TestIdxLoader:
    def test_header_and_shapes(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=10, dtype=np.uint8)
        ds = data.load_idx(*write_idx_pair(tmp_path, images, labels))
        assert ds.images.shape == (10, 1, 28, 28)
        assert len(ds) == 10

    def test_affine_endpoints(self, tmp_path):
        images = np.array([[[0, 255], [128, 1]]], dtype=np.uint8)
        labels = np.array([3], dtype=np.uint8)
        ds = data.load_idx(*write_idx_pair(tmp_path, images, labels))
        assert ds.images[0, 0, 0, 0] == pytest.approx(-0.5)
        assert ds.images[0, 0, 0, 1] == pytest.approx(0.5)
        assert ds.images[0, 0, 1, 1] == pytest.approx(1 / 255 - 0.5)

    def test_bad_magic_offset_zero(self, tmp_path):
        img_path = tmp_path / "bad.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x0804, 1, 2, 2) + b"\x00" * 4)
        lab_path = tmp_path / "lab.idx"
        lab_path.write_bytes(struct.pack(">II", 0x0801, 1) + b"\x00")
        with pytest.raises(FormatError) as err:
            data.load_idx(img_path, lab_path)
        assert err.value.offset == 0
        assert "magic" in str(err.value)

    def test_truncated_payload_names_lengths(self, tmp_path):
        img_path = tmp_path / "short.idx"
        img_path.write_bytes(struct.pack(">IIII", 0x0803, 2, 2, 2) + b"\x00" * 5)
        lab_path = tmp_path / "lab.idx"
        lab_path.write_bytes(struct.pack(">II", 0x0801, 2) + b"\x00\x01")
        with pytest.raises(FormatError) as err:
            data.load_idx(img_path, lab_path)
        assert "5" in str(err.value) and "8" in str(err.value)
        assert err.value.offset is not None

    def test_count_mismatch(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
        labels = rng.integers(0, 10, size=4, dtype=np.uint8)
        img_path, _ = write_idx_pair(tmp_path, images, labels[:3])
        lab_path = tmp_path / "labels4.idx"
        lab_path.write_bytes(struct.pack(">II", 0x0801, 4) + labels.tobytes())
        with pytest.raises(FormatError):
            data.load_idx(img_path, lab_path)

    def test_empty_file(self, tmp_path):
        img_path = tmp_path / "empty.idx"
        img_path.write_bytes(b"")
        lab_path = tmp_path / "lab.idx"
        lab_path.write_bytes(struct.pack(">II", 0x0801, 0))
        with pytest.raises(FormatError) as err:
            data.load_idx(img_path, lab_path)
        assert err.value.offset == 0

    def test_round_trip_bit_exact(self, tmp_path):
        ds = data.synth_dataset(20, 4, shape=(1, 12, 12), seed=5)
        data.save_idx(ds, tmp_path / "i.idx", tmp_path / "l.idx")
        back = data.load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        data.save_idx(back, tmp_path / "i2.idx", tmp_path / "l2.idx")
        assert (tmp_path / "i.idx").read_bytes() == (tmp_path / "i2.idx").read_bytes()
        assert (tmp_path / "l.idx").read_bytes() == (tmp_path / "l2.idx").read_bytes()
        np.testing.assert_array_equal(back.labels, ds.labels)


class TestCifarLoader:
    def test_single_record(self, tmp_path):
        record = bytes([7]) + bytes(3072)
        path = tmp_path / "batch.bin"
        path.write_bytes(record)
        ds = data.load_cifar_bin(path)
        assert len(ds) == 1
        assert ds.labels[0] == 7
        assert ds.images.shape == (1, 3, 32, 32)

    def test_all_zero_pixels_map_to_low_end(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes([1]) + bytes(3072))
        ds = data.load_cifar_bin(path)
        assert np.all(ds.images == -0.5)

    def test_bad_length_modulus_offset(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(3073 * 2 + 100))
        with pytest.raises(FormatError) as err:
            data.load_cifar_bin(path)
        assert err.value.offset == 3073 * 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(FormatError) as err:
            data.load_cifar_bin(path)
        assert err.value.offset == 0

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        raw = rng.integers(0, 256, size=(5, 3, 32, 32), dtype=np.uint8)
        ds = data.ImageDataset((raw.astype(np.float32) / 255.0) - 0.5,
                               rng.integers(0, 10, size=5), num_classes=10)
        path = tmp_path / "a.bin"
        data.save_cifar_bin(ds, path)
        back = data.load_cifar_bin(path)
        path2 = tmp_path / "b.bin"
        data.save_cifar_bin(back, path2)
        assert path.read_bytes() == path2.read_bytes()


class TestSubset:
    def test_full_fraction_keeps_order(self, desk_train):
        sub = data.subset_fraction(desk_train, 1.0, seed=3)
        np.testing.assert_array_equal(sub.images, desk_train.images)
        np.testing.assert_array_equal(sub.labels, desk_train.labels)

    def test_one_percent_count(self):
        ds = data.synth_dataset(6000, 10, shape=(1, 8, 8), seed=1)
        sub = data.subset_fraction(ds, 0.01, seed=2)
        assert len(sub) == 60

    def test_same_seed_same_subset(self, desk_train):
        a = data.subset_fraction(desk_train, 0.25, seed=9)
        b = data.subset_fraction(desk_train, 0.25, seed=9)
        np.testing.assert_array_equal(a.images, b.images)

    def test_stratified_when_divisible(self):
        ds = data.synth_dataset(1000, 10, shape=(1, 8, 8), seed=4)
        sub = data.subset_fraction(ds, 0.5, seed=5)
        counts = np.bincount(sub.labels, minlength=10)
        assert np.all(counts == 50)

    def test_fraction_out_of_range(self, desk_train):
        with pytest.raises(ParameterError):
            data.subset_fraction(desk_train, 0.0, seed=1)
        with pytest.raises(ParameterError):
            data.subset_fraction(desk_train, 1.5, seed=1)

    @given(st.sampled_from([0.05, 0.17, 0.33, 0.5, 0.77, 0.99]),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_subset_is_submultiset(self, fraction, seed):
        ds = data.synth_dataset(200, 5, shape=(1, 8, 8), seed=6)
        sub = data.subset_fraction(ds, fraction, seed=seed)
        assert len(sub) == int(fraction * 200)
        pool = {}
        for img in ds.images:
            pool[img.tobytes()] = pool.get(img.tobytes(), 0) + 1
        for img in sub.images:
            key = img.tobytes()
            assert pool.get(key, 0) > 0
            pool[key] -= 1


class TestSynthDataset:
    def test_one_per_class(self):
        ds = data.synth_dataset(5, 5, shape=(1, 8, 8), seed=7)
        assert sorted(ds.labels.tolist()) == [0, 1, 2, 3, 4]

    def test_noise_free_classes_are_constant_patterns(self):
        ds = data.synth_dataset(40, 2, shape=(1, 8, 8), seed=8, noise=0.0)
        for cls in (0, 1):
            rows = ds.images[ds.labels == cls]
            assert np.all(rows == rows[0])
        assert not np.array_equal(ds.images[ds.labels == 0][0],
                                  ds.images[ds.labels == 1][0])

    def test_balanced_within_one(self):
        ds = data.synth_dataset(103, 10, shape=(1, 8, 8), seed=9)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.max() - counts.min() <= 1

    def test_values_in_range(self, desk_train):
        assert desk_train.images.min() >= -0.5
        assert desk_train.images.max() <= 0.5

    def test_linear_probe_separates(self, desk_train, desk_test):
        n = len(desk_train)
        x = desk_train.images.reshape(n, -1)
        onehot = np.eye(desk_train.num_classes)[desk_train.labels]
        w, *_ = np.linalg.lstsq(np.hstack([x, np.ones((n, 1))]), onehot, rcond=None)
        xt = desk_test.images.reshape(len(desk_test), -1)
        pred = np.argmax(np.hstack([xt, np.ones((len(xt), 1))]) @ w, axis=1)
        assert np.mean(pred == desk_test.labels) >= 0.8

    def test_fewer_samples_than_classes_errors(self):
        with pytest.raises(ParameterError):
            data.synth_dataset(3, 5, shape=(1, 8, 8), seed=1)
