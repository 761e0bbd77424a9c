import struct

import numpy as np
import pytest

from symdistill.featstore import FeatureFormatError, FeatureSet, read_features, read_header, write_features
from conftest import random_features


def _independent_read(path):
    """Plain struct/array parse of a SYMF file, written without the package reader."""
    raw = open(path, "rb").read()
    assert raw[:4] == b"SYMF"
    version, n, v, gh, gw, d_t = struct.unpack_from("<6I", raw, 4)
    dtype, has_labels, reserved = struct.unpack_from("<BBH", raw, 28)
    off = 32
    labels = None
    if has_labels:
        (n_classes,) = struct.unpack_from("<I", raw, off)
        labels = list(struct.unpack_from(f"<{n}I", raw, off + 4))
        off += 4 + 4 * n
    p = 1 + gh * gw
    payload = raw[off:]
    assert len(payload) == 4 * n * v * p * d_t
    return dict(version=version, n=n, v=v, gh=gh, gw=gw, d_t=d_t, dtype=dtype, reserved=reserved,
                labels=labels, payload=payload)


def test_zero_set_layout(tmp_path):
    fs = FeatureSet(tokens=np.zeros((1, 1, 5, 4), np.float32), grid_h=2, grid_w=2)
    path = tmp_path / "z.symf"
    write_features(fs, path)
    raw = path.read_bytes()
    assert len(raw) == 32 + 1 * 1 * 5 * 4 * 4
    assert raw[32:] == bytes(80)
    assert raw[:4] == b"SYMF"


def test_round_trip_bytes_match_independent_reader(tmp_path):
    fs = random_features(n=5, views=3, grid=(3, 2), d_t=7, seed=3)
    path = tmp_path / "r.symf"
    write_features(fs, path)
    ind = _independent_read(path)
    assert ind["payload"] == fs.tokens.astype("<f4").tobytes()
    assert ind["labels"] == fs.labels.tolist()
    assert (ind["version"], ind["dtype"], ind["reserved"]) == (1, 0, 0)
    back = read_features(path)
    assert back.tokens.tobytes() == fs.tokens.tobytes()
    assert np.array_equal(back.labels, fs.labels)
    assert back.n_classes == fs.n_classes


def test_header_fixes_payload_length(tmp_path):
    fs = random_features(n=2, views=1, grid=(1, 3), d_t=5)
    path = tmp_path / "h.symf"
    write_features(fs, path)
    h = read_header(path)
    labels_block = 4 + 4 * h["n"]
    expected = 32 + labels_block + 4 * h["n"] * h["v"] * (1 + h["grid_h"] * h["grid_w"]) * h["d_t"]
    assert path.stat().st_size == expected


def test_empty_set_rejected(tmp_path):
    fs = FeatureSet(tokens=np.zeros((0, 1, 5, 4), np.float32), grid_h=2, grid_w=2)
    with pytest.raises(FeatureFormatError, match="empty set"):
        write_features(fs, tmp_path / "e.symf")


def test_non_finite_refused(tmp_path):
    fs = random_features()
    fs.tokens[0, 0, 0, 0] = np.nan
    with pytest.raises(FeatureFormatError):
        write_features(fs, tmp_path / "n.symf")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.symf"
    path.write_bytes(b"XXXX" + bytes(60))
    with pytest.raises(FeatureFormatError, match="bad magic"):
        read_features(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v.symf"
    write_features(random_features(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(FeatureFormatError, match="version"):
        read_features(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.symf"
    write_features(random_features(), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FeatureFormatError, match="truncated"):
        read_features(path)


def test_nan_in_payload_rejected(tmp_path):
    path = tmp_path / "nan.symf"
    write_features(random_features(), path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(raw))
    with pytest.raises(FeatureFormatError, match="non-finite"):
        read_features(path)


def test_view_slices():
    fs = random_features(n=4, views=3, grid=(2, 2), d_t=6)
    for i in range(4):
        for v in range(3):
            g, p = fs.view(i, v)
            flat = fs.tokens.reshape(-1)
            base = ((i * 3 + v) * 5) * 6
            assert np.array_equal(g, flat[base:base + 6])
            assert np.array_equal(p, flat[base + 6:base + 30].reshape(4, 6))


def test_single_view_and_range_errors():
    fs = random_features(n=2, views=1)
    g, p = fs.view(0, 0)
    assert np.array_equal(g, fs.tokens[0, 0, 0])
    with pytest.raises(IndexError):
        fs.view(2, 0)
    with pytest.raises(IndexError):
        fs.view(0, 1)


def test_invariants_enforced():
    with pytest.raises(ValueError):
        FeatureSet(tokens=np.zeros((1, 1, 4, 2), np.float32), grid_h=2, grid_w=2)
    with pytest.raises(ValueError):
        FeatureSet(tokens=np.zeros((2, 1, 5, 2), np.float32), grid_h=2, grid_w=2, labels=[0, 3], n_classes=3)
