import struct

import numpy as np
import pytest

from promptcl.featureio import (FormatError, load_feature_file, read_archive,
                                write_archive, write_feature_file)


def test_feature_round_trip(tmp_path):
    path = tmp_path / "f.bin"
    feats = np.random.default_rng(0).standard_normal((13, 5)).astype(np.float32)
    labels = [i % 3 for i in range(13)]
    write_feature_file(path, feats, labels)
    back, lab = load_feature_file(path)
    assert back.tobytes() == feats.tobytes()
    assert lab == labels


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "f.bin"
    write_feature_file(path, np.ones((4, 3), np.float32), [0, 1, 0, 1])
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="length"):
        load_feature_file(path)


def test_zero_dim_rejected(tmp_path):
    path = tmp_path / "f.bin"
    path.write_bytes(b"STARFEAT" + struct.pack("<III", 1, 0, 0))
    with pytest.raises(FormatError):
        load_feature_file(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "f.bin"
    path.write_bytes(b"NOTMAGIC" + struct.pack("<III", 1, 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError, match="magic"):
        load_feature_file(path)


def test_label_out_of_range(tmp_path):
    path = tmp_path / "f.bin"
    write_feature_file(path, np.ones((2, 2), np.float32), [0, 7])
    with pytest.raises(FormatError, match="range"):
        load_feature_file(path, num_classes=3)


def test_archive_round_trip(tmp_path):
    path = tmp_path / "a.bin"
    arrays = {
        "weights": np.arange(12, dtype=np.float32).reshape(3, 4),
        "ids": np.array([3, 1, 4], dtype=np.int64),
        "scalar": np.float32(2.5),
    }
    write_archive(path, b"STARTEST", arrays)
    back = read_archive(path, b"STARTEST")
    assert set(back) == set(arrays)
    np.testing.assert_array_equal(back["weights"], arrays["weights"])
    np.testing.assert_array_equal(back["ids"], arrays["ids"])
    assert float(back["scalar"]) == 2.5
    with pytest.raises(FormatError):
        read_archive(path, b"STAROTHR")
