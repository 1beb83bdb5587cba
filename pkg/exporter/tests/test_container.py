"""Container writer: byte-exact round trips and format conformance."""

import struct

import numpy as np
import pytest

from d2pf_exporter.container import (ContainerError, read_container,
                                     write_container)


def sample(count=3, k=4, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return {i: rng.standard_normal((k, d)).astype(np.float32)
            for i in range(count)}


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        path = tmp_path / "f.d2pf"
        matrices = sample()
        write_container(path, matrices)
        loaded = read_container(path)
        assert sorted(loaded) == [0, 1, 2]
        for sid, matrix in matrices.items():
            np.testing.assert_array_equal(loaded[sid], matrix)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "f.d2pf"
        write_container(path, sample(count=2, k=3, d=7))
        blob = path.read_bytes()
        magic, version, dtype, k, d, count = struct.unpack_from("<4sIIIIQ", blob)
        assert (magic, version, dtype, k, d, count) == (b"D2PF", 1, 1, 3, 7, 2)
        first_id, first_offset = struct.unpack_from("<QQ", blob, 28)
        assert first_id == 0 and first_offset == 28 + 2 * 16
        assert len(blob) == 28 + 2 * 16 + 2 * 3 * 7 * 4

    def test_records_sorted_by_sentence_id(self, tmp_path):
        path = tmp_path / "f.d2pf"
        matrices = {5: np.ones((2, 2), np.float32),
                    1: np.zeros((2, 2), np.float32)}
        write_container(path, matrices)
        ids = list(read_container(path))
        assert ids == sorted(ids)

    def test_write_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_container(a, sample(seed=3))
        write_container(b, sample(seed=3))
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_shape_mismatch_and_nan(self, tmp_path):
        with pytest.raises(ContainerError):
            write_container(tmp_path / "x", {0: np.zeros((2, 2), np.float32),
                                             1: np.zeros((3, 2), np.float32)})
        with pytest.raises(ContainerError):
            write_container(tmp_path / "y",
                            {0: np.full((2, 2), np.nan, np.float32)})
