import struct

import numpy as np
import pytest

from conftest import random_model
from ttnqml.data import Dataset, ScalingRecord
from ttnqml.serialize import (
    FormatError,
    dataset_from_bytes,
    dataset_to_bytes,
    load_dataset,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_dataset,
    save_model,
)
from ttnqml.ttn import coarse_grain_batch, topology_image


class TestModelContainer:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        model = random_model(rng, 16, max_chi=4, n_classes=3, schedule=topology_image(4, 4), isometric=False)
        model.metadata = {"eps": [1e-4] * 4, "note": "x"}
        save_model(model, tmp_path / "m.ttn")
        back = load_model(tmp_path / "m.ttn")
        for la, lb in zip(model.nodes, back.nodes):
            for a, b in zip(la, lb):
                np.testing.assert_array_equal(a.matrix, b.matrix)
        np.testing.assert_array_equal(model.weights.matrix, back.weights.matrix)
        assert back.weights.is_isometric is False
        assert back.local_map == model.local_map
        assert back.schedule == model.schedule
        assert back.metadata == model.metadata
        assert model_to_bytes(back) == model_to_bytes(model)
        X = rng.uniform(size=(3, 16))
        np.testing.assert_array_equal(coarse_grain_batch(back, X), coarse_grain_batch(model, X))

    def test_without_weights(self, rng):
        model = random_model(rng, 4)
        model.weights = None
        assert model_from_bytes(model_to_bytes(model)).weights is None

    def test_header_layout(self, rng):
        blob = model_to_bytes(random_model(rng, 4))
        assert blob[:8] == b"TTNMODL\x00"
        (n,) = struct.unpack("<I", blob[8:12])
        assert b'"version":1' in blob[12 : 12 + n]

    def test_bad_magic(self, rng):
        blob = model_to_bytes(random_model(rng, 4))
        with pytest.raises(FormatError):
            model_from_bytes(b"XXXXXXXX" + blob[8:])

    def test_truncated(self, rng):
        blob = model_to_bytes(random_model(rng, 4))
        with pytest.raises(FormatError):
            model_from_bytes(blob[:-8])

    def test_trailing_bytes(self, rng):
        with pytest.raises(FormatError):
            model_from_bytes(model_to_bytes(random_model(rng, 4)) + b"\x00" * 8)

    def test_corrupted_isometry(self, rng):
        blob = bytearray(model_to_bytes(random_model(rng, 4)))
        (n,) = struct.unpack("<I", blob[8:12])
        blob[12 + n : 12 + n + 8] = struct.pack("<d", 5.0)
        with pytest.raises(FormatError, match="invariants"):
            model_from_bytes(bytes(blob))

    def test_wrong_version(self, rng):
        blob = model_to_bytes(random_model(rng, 4)).replace(b'"version":1', b'"version":9')
        with pytest.raises(FormatError, match="version"):
            model_from_bytes(blob)


class TestDatasetContainer:
    def test_round_trip(self, rng, tmp_path):
        ds = Dataset(
            rng.uniform(size=(5, 16)),
            rng.integers(0, 3, 5),
            {"kind": "image", "rows": 4, "cols": 4},
            ScalingRecord(np.array(0.0), np.array(255.0)),
            "toy",
        )
        save_dataset(ds, tmp_path / "d.ttn")
        back = load_dataset(tmp_path / "d.ttn")
        np.testing.assert_array_equal(back.samples, ds.samples)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.layout == ds.layout and back.name == "toy"
        assert float(back.scaling.x_max) == 255.0
        assert dataset_to_bytes(back) == dataset_to_bytes(ds)

    def test_model_blob_is_not_a_dataset(self, rng):
        with pytest.raises(FormatError):
            dataset_from_bytes(model_to_bytes(random_model(rng, 4)))
