import struct

import numpy as np
import pytest

from sbp.data import Dataset, make_blobs, read_sbpd, write_sbpd
from sbp.errors import ConfigurationError


class TestMakeBlobs:
    def test_shapes_and_balance(self):
        ds = make_blobs(20, grid=(4, 4), channels=2, n_classes=2, seed=0)
        assert ds.x.shape == (20, 4, 4, 2)
        assert ds.labels.shape == (20,)
        counts = np.bincount(ds.labels, minlength=2)
        assert counts[0] == counts[1] == 10

    def test_deterministic_in_seed(self):
        a = make_blobs(10, grid=(4, 4), seed=7)
        b = make_blobs(10, grid=(4, 4), seed=7)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.labels, b.labels)

    def test_noise_zero_is_separable(self):
        ds = make_blobs(8, grid=(8, 8), channels=1, noise=0.0, seed=0)
        # with no noise the class bump peaks in a class-specific corner
        for x, label in zip(ds.x, ds.labels):
            peak = np.unravel_index(np.argmax(x[:, :, 0]), (8, 8))
            assert (peak[0] < 4) == (label % 2 == 0)

    def test_mismatched_labels_rejected(self):
        with pytest.raises(ConfigurationError):
            Dataset(np.zeros((3, 2, 2, 1)), np.zeros(4, dtype=np.int64))


class TestBatches:
    def test_covers_all_samples(self):
        ds = make_blobs(10, grid=(2, 2), seed=0)
        batches = list(ds.batches(4))
        assert [b[0].shape[0] for b in batches] == [4, 4, 2]
        stacked = np.concatenate([b[0] for b in batches])
        assert np.array_equal(stacked, ds.x)


class TestSbpdRoundtrip:
    def test_roundtrip(self, tmp_path):
        ds = make_blobs(6, grid=(3, 3), channels=2, seed=1)
        path = tmp_path / "toy.sbpd"
        write_sbpd(path, ds)
        back = read_sbpd(path)
        np.testing.assert_allclose(back.x, ds.x, atol=1e-6)  # float32 on disk
        assert np.array_equal(back.labels, ds.labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sbpd"
        path.write_bytes(b"NOPE" + b"\x00" * 24)
        with pytest.raises(ConfigurationError, match="magic"):
            read_sbpd(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.sbpd"
        path.write_bytes(b"SBPD" + struct.pack("<IIIIII", 9, 0, 1, 1, 1, 1))
        with pytest.raises(ConfigurationError, match="version"):
            read_sbpd(path)

    def test_truncated_features(self, tmp_path):
        ds = make_blobs(4, grid=(2, 2), channels=1, seed=0)
        path = tmp_path / "trunc.sbpd"
        write_sbpd(path, ds)
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(ConfigurationError, match="truncated"):
            read_sbpd(path)

    def test_trailing_bytes(self, tmp_path):
        ds = make_blobs(4, grid=(2, 2), channels=1, seed=0)
        path = tmp_path / "trail.sbpd"
        write_sbpd(path, ds)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ConfigurationError, match="trailing"):
            read_sbpd(path)

    def test_label_count_mismatch(self, tmp_path):
        ds = make_blobs(4, grid=(2, 2), channels=1, seed=0)
        path = tmp_path / "labels.sbpd"
        write_sbpd(path, ds)
        (tmp_path / "labels.sbpd.labels").write_text("0\n1\n")
        with pytest.raises(ConfigurationError, match="label count"):
            read_sbpd(path)
