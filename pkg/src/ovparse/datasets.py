"""Labeled feature datasets and their binary file formats.

``OVSF`` holds independent samples, ``OVSG`` holds H x W feature grids with
label maps. Both are little-endian with float32 features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class FeatureDataset:
    """Samples ``(label, feature)``; a grid dataset stores its grids flattened
    pixel-major with ``grid_shape = (H, W)``."""

    dim: int
    labels: np.ndarray
    features: np.ndarray
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.features = np.asarray(self.features, dtype=np.float32).reshape(-1, self.dim)
        if len(self.labels) != len(self.features):
            raise DatasetFormatError(f"{len(self.labels)} labels for {len(self.features)} features")
        if self.grid_shape is not None:
            h, w = self.grid_shape
            if h < 1 or w < 1 or len(self.labels) % (h * w):
                raise DatasetFormatError(f"sample count {len(self.labels)} is not a multiple of grid {h}x{w}")
            self.grid_shape = (int(h), int(w))

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.grid_shape == other.grid_shape
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    @classmethod
    def from_grids(cls, grids) -> "FeatureDataset":
        """Build from ``[(label_map (H, W), features (H, W, D)), ...]``."""
        grids = list(grids)
        if not grids:
            raise DatasetFormatError("no grids given")
        h, w, d = np.shape(grids[0][1])
        labels, feats = [], []
        for lab, f in grids:
            if np.shape(lab) != (h, w) or np.shape(f) != (h, w, d):
                raise DatasetFormatError("all grids must share one H x W x D shape")
            labels.append(np.asarray(lab).reshape(-1))
            feats.append(np.asarray(f).reshape(-1, d))
        return cls(d, np.concatenate(labels), np.concatenate(feats), (h, w))

    @property
    def grids(self):
        if self.grid_shape is None:
            raise DatasetFormatError("not a grid dataset")
        h, w = self.grid_shape
        n = h * w
        return [
            (self.labels[i:i + n].reshape(h, w), self.features[i:i + n].reshape(h, w, self.dim))
            for i in range(0, len(self.labels), n)
        ]

    def subset(self, mask) -> "FeatureDataset":
        return FeatureDataset(self.dim, self.labels[mask], self.features[mask])

    def check_labels(self, num_concepts: int) -> None:
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= num_concepts):
            raise DatasetFormatError(f"label ids outside 0..{num_concepts - 1}")


_HEAD_F = struct.Struct("<4sIIQ")
_HEAD_G = struct.Struct("<4sIIIIQ")


def write_dataset(ds: FeatureDataset, path) -> None:
    with open(path, "wb") as fh:
        if ds.grid_shape is None:
            fh.write(_HEAD_F.pack(b"OVSF", 1, ds.dim, len(ds)))
            rec = np.zeros(len(ds), dtype=[("label", "<u4"), ("feature", "<f4", (ds.dim,))])
            rec["label"] = ds.labels
            rec["feature"] = ds.features
            fh.write(rec.tobytes())
        else:
            h, w = ds.grid_shape
            fh.write(_HEAD_G.pack(b"OVSG", 1, h, w, ds.dim, len(ds) // (h * w)))
            for lab, feat in ds.grids:
                fh.write(lab.astype("<u4").tobytes())
                fh.write(feat.astype("<f4").tobytes())


def read_dataset(path) -> FeatureDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:4]
    if magic == b"OVSF":
        if len(data) < _HEAD_F.size:
            raise DatasetFormatError(f"{path}: truncated header")
        _, version, d, count = _HEAD_F.unpack_from(data)
        _version_ok(path, version)
        dt = np.dtype([("label", "<u4"), ("feature", "<f4", (d,))])
        body = data[_HEAD_F.size:]
        if len(body) != dt.itemsize * count:
            raise DatasetFormatError(f"{path}: expected {count} records of dim {d}, got {len(body)} bytes")
        rec = np.frombuffer(body, dtype=dt)
        return FeatureDataset(d, rec["label"].astype(np.int64), rec["feature"].copy())
    if magic == b"OVSG":
        if len(data) < _HEAD_G.size:
            raise DatasetFormatError(f"{path}: truncated header")
        _, version, h, w, d, count = _HEAD_G.unpack_from(data)
        _version_ok(path, version)
        n = h * w
        step = 4 * n + 4 * n * d
        body = data[_HEAD_G.size:]
        if len(body) != step * count:
            raise DatasetFormatError(f"{path}: expected {count} grids of {h}x{w}x{d}, got {len(body)} bytes")
        if count == 0:
            return FeatureDataset(d, np.empty(0, np.int64), np.empty((0, d), np.float32), (h, w))
        labels, feats = [], []
        for i in range(count):
            off = i * step
            labels.append(np.frombuffer(body, "<u4", n, off))
            feats.append(np.frombuffer(body, "<f4", n * d, off + 4 * n).reshape(n, d))
        return FeatureDataset(d, np.concatenate(labels).astype(np.int64), np.concatenate(feats), (h, w))
    raise DatasetFormatError(f"{path}: unknown dataset magic {magic!r}")


def _version_ok(path, version):
    if version != 1:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
