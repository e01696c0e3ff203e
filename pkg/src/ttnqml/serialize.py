"""Binary container for models and datasets.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(sorted keys), then arrays as little-endian float64 in row-major order
(dataset labels as little-endian int64). Model payload order is every node
matrix by layer then position, followed by the weight matrix if present.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset, ScalingRecord
from .encoding import LocalMap
from .numerics import ContractError
from .ttn import Isometry, PairingSchedule, TTNModel, WeightMatrix

__all__ = [
    "FormatError",
    "FORMAT_VERSION",
    "model_to_bytes",
    "model_from_bytes",
    "save_model",
    "load_model",
    "dataset_to_bytes",
    "dataset_from_bytes",
    "save_dataset",
    "load_dataset",
]

FORMAT_VERSION = 1
MODEL_MAGIC = b"TTNMODL\x00"
DATA_MAGIC = b"TTNDATA\x00"
_F8 = np.dtype("<f8")
_I8 = np.dtype("<i8")


class FormatError(ValueError):
    pass


def _pack(magic: bytes, header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<I", len(head)), head]
    parts += [np.ascontiguousarray(a).tobytes() for a in arrays]
    return b"".join(parts)


def _unpack_header(blob: bytes, magic: bytes) -> tuple[dict, int]:
    if len(blob) < 12 or blob[:8] != magic:
        raise FormatError("not a recognised container (bad magic)")
    (n,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + n:
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[12 : 12 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"corrupt header: {err}") from None
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('version')}")
    if header.get("scalar") != "float64":
        raise FormatError(f"unsupported scalar type {header.get('scalar')}")
    return header, 12 + n


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob, self.offset = blob, offset

    def take(self, shape, dtype=_F8) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if self.offset + n > len(self.blob):
            raise FormatError(f"payload truncated at offset {self.offset}")
        arr = np.frombuffer(self.blob, dtype=dtype, count=n // dtype.itemsize, offset=self.offset)
        self.offset += n
        return arr.reshape(shape).astype(dtype.newbyteorder("="))

    def finish(self) -> None:
        if self.offset != len(self.blob):
            raise FormatError(f"{len(self.blob) - self.offset} trailing bytes")


def model_to_bytes(model: TTNModel) -> bytes:
    model.check()
    w = model.weights
    header = {
        "kind": "ttn-model",
        "version": FORMAT_VERSION,
        "scalar": "float64",
        "n_features": model.n_features,
        "n_sites": model.n_sites,
        "schedule": model.schedule.to_list(),
        "map": model.local_map.to_dict(),
        "nodes": [[[n.left_dim, n.right_dim, n.out_dim] for n in layer] for layer in model.nodes],
        "bond_dims": model.bond_dims,
        "weights": None if w is None else {"shape": list(w.matrix.shape), "is_isometric": w.is_isometric},
        "metadata": model.metadata,
    }
    arrays = [n.matrix.astype(_F8) for layer in model.nodes for n in layer]
    if w is not None:
        arrays.append(w.matrix.astype(_F8))
    return _pack(MODEL_MAGIC, header, arrays)


def model_from_bytes(blob: bytes) -> TTNModel:
    header, offset = _unpack_header(blob, MODEL_MAGIC)
    if header.get("kind") != "ttn-model":
        raise FormatError("container does not hold a model")
    rd = _Reader(blob, offset)
    try:
        schedule = PairingSchedule(tuple(tuple(tuple(p) for p in layer) for layer in header["schedule"]))
        nodes = [
            [Isometry(rd.take((l * r, o)), l, r) for l, r, o in layer] for layer in header["nodes"]
        ]
        weights = None
        if header["weights"] is not None:
            wh = header["weights"]
            weights = WeightMatrix(rd.take(tuple(wh["shape"])), bool(wh["is_isometric"]))
        rd.finish()
        model = TTNModel(
            schedule,
            nodes,
            LocalMap.from_dict(header["map"]),
            int(header["n_features"]),
            weights,
            header.get("metadata", {}),
        )
        if model.n_sites != header["n_sites"]:
            raise FormatError("schedule does not match the recorded site count")
        model.check()
    except (KeyError, TypeError) as err:
        raise FormatError(f"malformed header: {err}") from None
    except ContractError as err:
        raise FormatError(f"stored model violates its invariants: {err}") from None
    return model


def save_model(model: TTNModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TTNModel:
    return model_from_bytes(Path(path).read_bytes())


def dataset_to_bytes(ds: Dataset) -> bytes:
    header = {
        "kind": "dataset",
        "version": FORMAT_VERSION,
        "scalar": "float64",
        "shape": list(ds.samples.shape),
        "layout": ds.layout,
        "scaling": None if ds.scaling is None else ds.scaling.to_dict(),
        "name": ds.name,
    }
    return _pack(DATA_MAGIC, header, [ds.samples.astype(_F8), ds.labels.astype(_I8)])


def dataset_from_bytes(blob: bytes) -> Dataset:
    header, offset = _unpack_header(blob, DATA_MAGIC)
    if header.get("kind") != "dataset":
        raise FormatError("container does not hold a dataset")
    rd = _Reader(blob, offset)
    m, length = header["shape"]
    samples = rd.take((m, length))
    labels = rd.take((m,), _I8)
    rd.finish()
    scaling = None if header["scaling"] is None else ScalingRecord.from_dict(header["scaling"])
    return Dataset(samples, labels, header["layout"], scaling, header.get("name", ""))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
