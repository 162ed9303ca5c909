import struct

import numpy as np
import pytest

from ssmlab import data as ds
from ssmlab.data import DataError, Dataset


class TestIdxFormat:
    def write_fixture(self, tmp_path, n=3, h=4, w=4):
        rng = np.random.default_rng(0)
        images = rng.uniform(0, 1, (n, h, w, 1))
        labels = rng.integers(0, 3, n)
        dataset = Dataset(images, labels, 3)
        ip = tmp_path / "images.idx3-ubyte"
        lp = tmp_path / "labels.idx1-ubyte"
        ds.write_idx(dataset, ip, lp)
        return dataset, ip, lp

    def test_roundtrip_on_pixel_grid(self, tmp_path):
        dataset, ip, lp = self.write_fixture(tmp_path)
        back = ds.load_idx(ip, lp)
        assert back.size == dataset.size
        assert np.array_equal(back.labels, dataset.labels)
        # pixels survive up to u8 quantization
        assert np.abs(back.images - dataset.images).max() <= 0.5 / 255 + 1e-12
        # a second roundtrip is exact: values already sit on the grid
        ds.write_idx(back, ip, lp)
        again = ds.load_idx(ip, lp)
        assert np.array_equal(again.images, back.images)

    def test_header_layout(self, tmp_path):
        _, ip, lp = self.write_fixture(tmp_path, n=3, h=4, w=5)
        raw = ip.read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x00000803, 3, 4, 5)
        assert len(raw) == 16 + 3 * 4 * 5
        raw = lp.read_bytes()
        assert struct.unpack(">II", raw[:8]) == (0x00000801, 3)

    def test_bad_image_magic(self, tmp_path):
        _, ip, lp = self.write_fixture(tmp_path)
        raw = bytearray(ip.read_bytes())
        raw[3] = 0x42
        ip.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            ds.load_idx(ip, lp)

    def test_bad_label_magic(self, tmp_path):
        _, ip, lp = self.write_fixture(tmp_path)
        raw = bytearray(lp.read_bytes())
        raw[3] = 0x42
        lp.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            ds.load_idx(ip, lp)

    def test_truncated_payload(self, tmp_path):
        _, ip, lp = self.write_fixture(tmp_path)
        raw = ip.read_bytes()
        ip.write_bytes(raw[:-1])
        with pytest.raises(DataError):
            ds.load_idx(ip, lp)

    def test_truncated_header(self, tmp_path):
        _, ip, lp = self.write_fixture(tmp_path)
        ip.write_bytes(b"\x00\x00")
        with pytest.raises(DataError):
            ds.load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        _, ip, lp = self.write_fixture(tmp_path)
        raw = bytearray(lp.read_bytes())
        raw[4:8] = struct.pack(">I", 2)
        lp.write_bytes(bytes(raw[:8 + 2]))
        with pytest.raises(DataError):
            ds.load_idx(ip, lp)


class TestSynth:
    def test_deterministic_by_seed(self):
        a = ds.synth_dataset(3, 4, 12, seed=9)
        b = ds.synth_dataset(3, 4, 12, seed=9)
        c = ds.synth_dataset(3, 4, 12, seed=10)
        assert np.array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_zero_noise_equals_templates(self):
        d = ds.synth_dataset(2, 5, 16, seed=0, noise_sigma=0.0)
        templates = np.clip(ds.class_templates(5, 16), 0.0, 1.0)
        for i in range(d.size):
            assert np.array_equal(d.images[i, :, :, 0], templates[d.labels[i]])

    def test_pixel_range_and_balance(self):
        d = ds.synth_dataset(4, 3, 10, seed=1)
        assert d.images.min() >= 0.0 and d.images.max() <= 1.0
        counts = np.bincount(d.labels, minlength=3)
        assert list(counts) == [4, 4, 4]

    def test_classes_separable_by_nearest_template(self):
        d = ds.synth_dataset(8, 10, 28, seed=2, noise_sigma=0.1)
        templates = ds.class_templates(10, 28)
        flat_t = templates.reshape(10, -1)
        flat_x = d.images[..., 0].reshape(d.size, -1)
        pred = np.argmin(
            ((flat_x[:, None, :] - flat_t[None]) ** 2).sum(-1), axis=1)
        assert (pred == d.labels).mean() >= 0.95

    def test_bad_sizes(self):
        with pytest.raises(DataError):
            ds.synth_dataset(0, 3, 8, seed=0)


class TestSubset:
    def test_stratified_counts(self):
        d = ds.synth_dataset(8, 4, 8, seed=0)
        s = ds.subset(d, 0.5, seed=1)
        assert s.size == 16
        assert list(np.bincount(s.labels, minlength=4)) == [4, 4, 4, 4]

    def test_uneven_fraction_total(self):
        d = ds.synth_dataset(5, 3, 8, seed=0)  # 15 items
        s = ds.subset(d, 0.4, seed=1)
        assert s.size == 6
        counts = np.bincount(s.labels, minlength=3)
        assert counts.sum() == 6 and counts.max() - counts.min() <= 1

    def test_deterministic(self):
        d = ds.synth_dataset(8, 4, 8, seed=0)
        a = ds.subset(d, 0.25, seed=7)
        b = ds.subset(d, 0.25, seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_full_fraction_is_identity(self):
        d = ds.synth_dataset(2, 3, 8, seed=0)
        assert ds.subset(d, 1.0, seed=0) is d

    def test_zero_selection_rejected(self):
        d = ds.synth_dataset(1, 3, 8, seed=0)
        with pytest.raises(DataError):
            ds.subset(d, 0.1, seed=0)

    def test_bad_fraction(self):
        d = ds.synth_dataset(1, 3, 8, seed=0)
        with pytest.raises(DataError):
            ds.subset(d, 1.5, seed=0)


class TestDatasetValidation:
    def test_count_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 4, 4, 1)), np.zeros(3, dtype=int), 3)

    def test_label_exceeds_classes(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 4, 4, 1)), np.array([0, 5]), 3)
