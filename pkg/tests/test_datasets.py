import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovparse.datasets import DatasetFormatError, FeatureDataset, read_dataset, write_dataset
from ovparse.synthetic import SyntheticSpec, balanced_tree, generate_synthetic, random_tree, zero_shot_world
from ovparse.taxonomy import build_graph


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 20), st.integers(0, 2**32 - 1))
def test_flat_round_trip(tmp_path_factory, dim, n, seed):
    rng = np.random.default_rng(seed)
    ds = FeatureDataset(dim, rng.integers(0, 50, n), rng.normal(size=(n, dim)))
    path = tmp_path_factory.mktemp("d") / "x.ovsf"
    write_dataset(ds, path)
    assert read_dataset(path) == ds
    assert path.stat().st_size == 20 + n * (4 + 4 * dim)


def test_flat_layout(tmp_path):
    write_dataset(FeatureDataset(2, [7], [[1.5, -2.0]]), tmp_path / "x.ovsf")
    raw = (tmp_path / "x.ovsf").read_bytes()
    assert raw[:20] == struct.pack("<4sIIQ", b"OVSF", 1, 2, 1)
    assert raw[20:] == struct.pack("<Iff", 7, 1.5, -2.0)


def test_grid_round_trip(tmp_path, rng):
    grids = [(rng.integers(0, 5, (3, 4)), rng.normal(size=(3, 4, 2))) for _ in range(2)]
    ds = FeatureDataset.from_grids(grids)
    write_dataset(ds, tmp_path / "g.ovsg")
    back = read_dataset(tmp_path / "g.ovsg")
    assert back == ds and back.grid_shape == (3, 4)
    lab, feat = back.grids[1]
    assert np.array_equal(lab, grids[1][0])
    np.testing.assert_array_equal(feat, grids[1][1].astype(np.float32))
    raw = (tmp_path / "g.ovsg").read_bytes()
    assert raw[:28] == struct.pack("<4sIIIIQ", b"OVSG", 1, 3, 4, 2, 2)


def test_empty_datasets(tmp_path):
    ds = FeatureDataset(3, np.empty(0, np.int64), np.empty((0, 3)))
    write_dataset(ds, tmp_path / "e.ovsf")
    assert read_dataset(tmp_path / "e.ovsf") == ds


@pytest.mark.parametrize("payload", [b"XXXX" + bytes(16), b"OVSF\x01", struct.pack("<4sIIQ", b"OVSF", 2, 1, 0),
                                     struct.pack("<4sIIQ", b"OVSF", 1, 2, 3) + bytes(5)])
def test_bad_files(tmp_path, payload):
    (tmp_path / "bad").write_bytes(payload)
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "bad")


def test_dataset_validation():
    with pytest.raises(DatasetFormatError):
        FeatureDataset(2, [1, 2], [[0.0, 0.0]])
    with pytest.raises(DatasetFormatError):
        FeatureDataset(1, [1, 2, 3], [[0.0]] * 3, (2, 1))
    with pytest.raises(DatasetFormatError):
        FeatureDataset(1, [9], [[0.0]]).check_labels(5)


def test_noise_free_limit():
    g = build_graph(balanced_tree((3,)))
    spec = SyntheticSpec(g, tuple(g.leaves), dim=4, sigma_obs=1e-12, samples_per_class=5, seed=0)
    w = generate_synthetic(spec)
    for c in g.leaves:
        x = w.train.features[w.train.labels == c]
        assert np.allclose(x, x[0], atol=1e-6)


def test_siblings_closer_than_cousins():
    g = build_graph(balanced_tree((3, 3)))
    sib, cousin = [], []
    for seed in range(50):
        spec = SyntheticSpec(g, tuple(g.leaves), dim=16, sigma_level=1.0, samples_per_class=2, seed=seed)
        means = generate_synthetic(spec).means
        for a in g.leaves:
            for b in g.leaves:
                if a < b:
                    d = np.linalg.norm(means[a] - means[b])
                    (sib if g.parents[a] == g.parents[b] else cousin).append(d)
    assert np.mean(sib) < np.mean(cousin)


def test_same_seed_same_bytes(tmp_path):
    spec = zero_shot_world(4)
    for i in range(2):
        w = generate_synthetic(spec)
        write_dataset(w.train, tmp_path / f"t{i}.ovsf")
        write_dataset(w.zero_shot_test, tmp_path / f"z{i}.ovsf")
    assert (tmp_path / "t0.ovsf").read_bytes() == (tmp_path / "t1.ovsf").read_bytes()
    assert (tmp_path / "z0.ovsf").read_bytes() == (tmp_path / "z1.ovsf").read_bytes()


def test_held_out_only_in_zero_shot_split():
    spec = zero_shot_world(1)
    w = generate_synthetic(spec)
    held = set(spec.held_out)
    assert len(held) == 5 and len(spec.train_classes) == 20
    assert set(w.zero_shot_test.labels.tolist()) == held
    assert not held & set(w.train.labels.tolist()) and not held & set(w.validation.labels.tolist())


def test_spec_validation():
    g = build_graph(balanced_tree((2,)))
    with pytest.raises(ValueError, match="no training classes"):
        SyntheticSpec(g, tuple(g.leaves), held_out=tuple(g.leaves))
    with pytest.raises(ValueError, match="leaf"):
        SyntheticSpec(g, tuple(g.leaves), held_out=(0,))
    with pytest.raises(ValueError, match="sigma"):
        SyntheticSpec(g, tuple(g.leaves), sigma_obs=0.0)


def test_random_tree_shape():
    g = build_graph(random_tree(50, 3))
    assert len(g) == 50 and len(g.edges) == 49
