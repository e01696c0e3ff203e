import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from ttnqml.data import (
    DataFormatError,
    Dataset,
    ScalingError,
    ScalingRecord,
    binary_walk_labels,
    default_data_dir,
    har_dataset,
    har_features,
    load_mnist,
    read_idx,
    read_idx_file,
    resize_16,
    scale_unit,
    subsample,
    write_idx,
)

MNIST_DIR = default_data_dir() / "mnist"


class TestIdx:
    def test_round_trip_bytes(self, rng, tmp_path):
        imgs = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
        write_idx(tmp_path / "img", imgs)
        raw = (tmp_path / "img").read_bytes()
        assert raw[:4] == bytes([0, 0, 8, 3])
        back = read_idx_file(tmp_path / "img")
        np.testing.assert_array_equal(back, imgs)
        write_idx(tmp_path / "img2", back)
        assert (tmp_path / "img2").read_bytes() == raw

    def test_truncated_payload_reports_offset(self, rng, tmp_path):
        write_idx(tmp_path / "img", rng.integers(0, 256, size=(2, 4, 4), dtype=np.uint8))
        raw = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(raw[:-3])
        with pytest.raises(DataFormatError, match="offset 45"):
            read_idx_file(tmp_path / "img")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"\x00\x00\x0d\x01\x00\x00\x00\x01\x00")
        with pytest.raises(DataFormatError, match="magic"):
            read_idx_file(tmp_path / "bad")

    def test_count_mismatch(self, rng, tmp_path):
        write_idx(tmp_path / "img", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "lab", np.zeros(4, dtype=np.uint8))
        with pytest.raises(DataFormatError, match="count mismatch"):
            read_idx(tmp_path / "img", tmp_path / "lab")

    def test_label_file_as_images(self, tmp_path):
        write_idx(tmp_path / "lab", np.zeros(4, dtype=np.uint8))
        with pytest.raises(DataFormatError):
            read_idx(tmp_path / "lab", tmp_path / "lab")

    @pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST files not available")
    def test_reference_header(self):
        images, labels = read_idx(MNIST_DIR / "train-images.idx3-ubyte", MNIST_DIR / "train-labels.idx1-ubyte")
        assert images.shape == (60000, 28, 28)
        assert labels.shape == (60000,)


class TestResize:
    def test_constant(self):
        out = resize_16(np.full((28, 28), 0.37))
        np.testing.assert_allclose(out, 0.37, atol=1e-14)
        assert out.shape == (16, 16)

    def test_linear_ramp(self):
        i, j = np.meshgrid(np.arange(28.0), np.arange(28.0), indexing="ij")
        out = resize_16(0.5 + 2.0 * i - 0.75 * j)
        c = (np.arange(16) + 0.5) * 28 / 16 - 0.5
        ci, cj = np.meshgrid(c, c, indexing="ij")
        np.testing.assert_allclose(out, 0.5 + 2.0 * ci - 0.75 * cj, atol=1e-9)

    def test_matches_separable_natural_spline(self, rng):
        img = rng.uniform(size=(28, 28))
        c = (np.arange(16) + 0.5) * 28 / 16 - 0.5
        rows = CubicSpline(np.arange(28), img, axis=0, bc_type="natural")(c)
        ref = CubicSpline(np.arange(28), rows, axis=1, bc_type="natural")(c)
        ref = np.clip(ref, img.min(), img.max())
        np.testing.assert_allclose(resize_16(img), ref, atol=1e-12)

    def test_batch_and_range(self, rng):
        imgs = rng.integers(0, 256, size=(3, 28, 28)).astype(float)
        out = resize_16(imgs)
        assert out.shape == (3, 16, 16)
        for a, b in zip(imgs, out):
            assert b.min() >= a.min() and b.max() <= a.max()
            np.testing.assert_array_equal(b, resize_16(a))

    def test_non_square(self):
        with pytest.raises(DataFormatError):
            resize_16(np.zeros((28, 20)))


class TestScaling:
    def test_identity_for_unit_data(self):
        x = np.array([[0.0, 0.3], [1.0, 0.5]])
        tr, _, rec, _ = scale_unit(x)
        np.testing.assert_array_equal(tr, x)

    def test_constant_rejected(self):
        with pytest.raises(ScalingError):
            scale_unit(np.ones((3, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_train_spans_unit_interval(self, seed):
        r = np.random.default_rng(seed)
        train = r.normal(3.0, 2.0, size=(20, 5))
        test = r.normal(3.0, 4.0, size=(10, 5))
        tr, te, rec, clamped = scale_unit(train, test)
        assert tr.min() == 0.0 and tr.max() == 1.0
        assert te.min() >= 0.0 and te.max() <= 1.0
        raw = (test - train.min()) / (train.max() - train.min())
        assert clamped == int(np.count_nonzero((raw < 0) | (raw > 1)))

    def test_record_round_trip(self):
        rec = ScalingRecord(np.array([0.0, 1.0]), np.array([2.0, 3.0]))
        back = ScalingRecord.from_dict(rec.to_dict())
        np.testing.assert_array_equal(back.x_min, rec.x_min)


def _write_har(root, split, acc, gyro, labels, prefix="total"):
    sig = root / split / "Inertial Signals"
    sig.mkdir(parents=True)
    for k, ax in enumerate("xyz"):
        np.savetxt(sig / f"{prefix}_acc_{ax}_{split}.txt", acc[:, :, k])
        np.savetxt(sig / f"body_gyro_{ax}_{split}.txt", gyro[:, :, k])
    np.savetxt(root / split / f"y_{split}.txt", labels, fmt="%d")


class TestHar:
    def test_three_four_five(self):
        acc = np.array([[[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]])
        gyro = np.array([[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]])
        rec = ScalingRecord(np.array([0.0, 0.0]), np.array([10.0, 4.0]))
        feats, _, _ = har_features(acc, gyro, rec)
        np.testing.assert_allclose(feats, [[0.5, 0.25, 0.1, 0.5]])

    def test_interleave_order(self, rng):
        acc = rng.uniform(size=(4, 8, 3))
        gyro = rng.uniform(size=(4, 8, 3))
        feats, rec, _ = har_features(acc, gyro)
        assert feats.shape == (4, 16)
        a = np.linalg.norm(acc, axis=-1)
        g = np.linalg.norm(gyro, axis=-1)
        np.testing.assert_allclose(feats[:, 0::2], (a - a.min()) / (a.max() - a.min()), atol=1e-14)
        np.testing.assert_allclose(feats[:, 1::2], (g - g.min()) / (g.max() - g.min()), atol=1e-14)

    def test_zero_gyro(self, rng):
        with pytest.raises(ScalingError):
            har_features(rng.uniform(size=(3, 8, 3)), np.zeros((3, 8, 3)))

    def test_length_mismatch(self, rng):
        with pytest.raises(DataFormatError):
            har_features(rng.uniform(size=(3, 8, 3)), rng.uniform(size=(3, 7, 3)))

    def test_labels(self):
        np.testing.assert_array_equal(binary_walk_labels([1, 2, 3, 4, 5, 6]), [0, 0, 0, 1, 1, 1])
        with pytest.raises(DataFormatError):
            binary_walk_labels([7])

    def test_dataset_from_files(self, rng, tmp_path):
        _write_har(tmp_path, "train", rng.uniform(size=(6, 8, 3)), rng.uniform(size=(6, 8, 3)), [1, 4, 2, 5, 3, 6])
        _write_har(tmp_path, "test", rng.uniform(size=(3, 8, 3)), rng.uniform(size=(3, 8, 3)), [6, 1, 2])
        train, test = har_dataset(tmp_path)
        assert train.samples.shape == (6, 16)
        np.testing.assert_array_equal(train.labels, [0, 1, 0, 1, 0, 1])
        np.testing.assert_array_equal(test.labels, [1, 0, 0])
        assert train.layout["timesteps"] == 8
        assert train.samples.min() == 0.0 and train.samples.max() == 1.0

    def test_body_acceleration_files(self, rng, tmp_path):
        for split in ("train", "test"):
            _write_har(tmp_path, split, rng.uniform(size=(2, 4, 3)), rng.uniform(size=(2, 4, 3)), [1, 5], "body")
        train, _ = har_dataset(tmp_path, accel="body")
        assert train.n_samples == 2
        with pytest.raises(FileNotFoundError):
            har_dataset(tmp_path, accel="total")

    def test_window_count_mismatch(self, rng, tmp_path):
        _write_har(tmp_path, "train", rng.uniform(size=(2, 4, 3)), rng.uniform(size=(2, 4, 3)), [1, 2, 3])
        _write_har(tmp_path, "test", rng.uniform(size=(2, 4, 3)), rng.uniform(size=(2, 4, 3)), [1, 2])
        with pytest.raises(DataFormatError):
            har_dataset(tmp_path)


class TestMnist:
    def test_synthetic_files(self, rng, tmp_path):
        imgs = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
        labels = np.array([0, 1, 2, 1, 0, 7, 1, 0, 2, 2, 1, 0], dtype=np.uint8)
        write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
        write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
        write_idx(tmp_path / "t10k-images-idx3-ubyte", imgs[:4])
        write_idx(tmp_path / "t10k-labels-idx1-ubyte", labels[:4])
        train, test = load_mnist(tmp_path, digits=(1, 0))
        assert train.n_samples == 8 and test.n_samples == 3
        assert set(train.labels.tolist()) == {0, 1}
        assert train.layout == {"kind": "image", "rows": 16, "cols": 16, "n_classes": 2}
        assert train.samples.min() == 0.0 and train.samples.max() == 1.0
        sub, _ = load_mnist(tmp_path, digits=(0, 1), train_limit=3, seed=1)
        assert sub.n_samples == 3

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path)


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DataFormatError):
        Dataset(np.zeros(3), np.zeros(3))


def test_subsample_sorted(rng):
    idx = subsample(100, 10, rng)
    assert idx.size == 10 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(subsample(5, None, rng), np.arange(5))
