import struct

import numpy as np
import pytest

from amproto.data import (Dataset, SyntheticSpec, gen_synthetic, planted_parts, read_ampd,
                          write_ampd)
from amproto.errors import BadShape, BadSpec, CorruptCheckpoint, IOFailure


def test_noiseless_single_part():
    spec = SyntheticSpec(classes=3, parts=1, tau=0.0, samples_per_class=5, seed=2)
    ds = gen_synthetic(spec)
    V = planted_parts(spec)
    for x, c in zip(ds.raw, ds.labels):
        flat = x.reshape(x.shape[0], -1)
        nz = np.flatnonzero(np.abs(flat).sum(axis=0))
        assert nz.size == 1
        np.testing.assert_allclose(flat[:, nz[0]], spec.part_scale * V[c, :, 0], atol=1e-6)


def test_planted_spectrum():
    spec = SyntheticSpec(classes=4, channels=16, parts=3, tau=0.1, samples_per_class=60, seed=1)
    ds = gen_synthetic(spec)
    for c in range(4):
        X = ds.raw[ds.labels == c].transpose(0, 2, 3, 1).reshape(-1, 16)
        ev = np.linalg.eigvalsh(np.cov(X.T))
        assert (ev > spec.tau ** 2 * 10).sum() >= 3


def test_seed_determinism():
    a = gen_synthetic(SyntheticSpec(seed=4, samples_per_class=3))
    b = gen_synthetic(SyntheticSpec(seed=4, samples_per_class=3))
    assert a.raw.tobytes() == b.raw.tobytes()
    c = gen_synthetic(SyntheticSpec(seed=5, parts_seed=4, samples_per_class=3))
    assert a.raw.tobytes() != c.raw.tobytes()
    assert np.array_equal(planted_parts(SyntheticSpec(seed=4)),
                          planted_parts(SyntheticSpec(seed=5, parts_seed=4)))
    assert np.array_equal(a.labels, np.repeat(np.arange(10), 3))


def test_visibility_keeps_at_least_one_part():
    spec = SyntheticSpec(classes=2, parts=3, tau=0.0, visibility=0.3, samples_per_class=50)
    ds = gen_synthetic(spec)
    shown = (np.abs(ds.raw).reshape(len(ds), ds.channels, -1).sum(axis=1) > 0).sum(axis=1)
    assert shown.min() >= 1 and shown.max() <= 3
    assert (shown < 3).any()


def test_bad_specs():
    for kw in ({"parts": 0}, {"parts": 26, "channels": 30}, {"tau": -1.0}, {"visibility": 0.0},
               {"classes": 0}, {"samples_per_class": 0}):
        with pytest.raises(BadSpec):
            gen_synthetic(SyntheticSpec(**kw))


def test_dataset_validation():
    with pytest.raises(BadShape):
        Dataset(np.zeros((2, 3, 4)), [0, 1], 2)
    with pytest.raises(BadShape):
        Dataset(np.zeros((2, 3, 2, 2)), [0, 2], 2)
    ds = Dataset(np.zeros((3, 2, 1, 1)), [0, 1, 1], 2)
    assert len(ds.subset([2, 0])) == 2 and ds.grid == (1, 1) and ds.channels == 2


def test_ampd_round_trip(tmp_path):
    ds = gen_synthetic(SyntheticSpec(classes=3, samples_per_class=4, seed=7))
    p = tmp_path / "d.ampd"
    write_ampd(ds, p)
    back = read_ampd(p)
    assert back.raw.tobytes() == ds.raw.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.num_classes == 3
    data = p.read_bytes()
    assert data[:4] == b"AMPD"
    assert struct.unpack("<6I", data[4:28]) == (1, 12, 3, 16, 5, 5)
    labels = np.frombuffer(data[28:28 + 48], dtype="<u4")
    assert labels.min() == 1 and labels.max() == 3


def test_ampd_corruption(tmp_path):
    ds = gen_synthetic(SyntheticSpec(classes=2, samples_per_class=2))
    p = tmp_path / "d.ampd"
    write_ampd(ds, p)
    data = p.read_bytes()
    for bad in (data[:-1], data + b"\0", b"XXXX" + data[4:], data[:4] + b"\2" + data[5:]):
        p.write_bytes(bad)
        with pytest.raises(CorruptCheckpoint):
            read_ampd(p)
    zero_label = bytearray(data)
    zero_label[28:32] = b"\0\0\0\0"
    p.write_bytes(bytes(zero_label))
    with pytest.raises(CorruptCheckpoint):
        read_ampd(p)
    with pytest.raises(IOFailure):
        read_ampd(tmp_path / "missing.ampd")
