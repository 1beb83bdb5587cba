"""D2PF container: bit-exact round trips and per-violation error kinds."""

import struct
import zlib

import numpy as np
import pytest

from dualmmt.d2pf import (FeatureRecord, read_d2pf, records_to_dict,
                          validate_d2pf, write_d2pf)
from dualmmt.errors import (BadMagicError, DataError, IndexInconsistencyError,
                            TruncatedFileError, VersionError)


def sample_matrices(count, k=4, d=6, seed=0):
    rng = np.random.default_rng(seed)
    return {i: rng.standard_normal((k, d)).astype(np.float32)
            for i in range(count)}


class TestRoundTrip:
    def test_two_record_roundtrip_bit_identical(self, tmp_path):
        path = tmp_path / "f.d2pf"
        matrices = sample_matrices(2)
        write_d2pf(path, matrices)
        records = read_d2pf(path, source_tag="reconstructed")
        assert [r.sentence_id for r in records] == [0, 1]
        for rec in records:
            assert rec.source_tag == "reconstructed"
            assert rec.matrix.dtype == np.float32
            np.testing.assert_array_equal(rec.matrix, matrices[rec.sentence_id])

    def test_write_is_deterministic(self, tmp_path):
        matrices = sample_matrices(5)
        a, b = tmp_path / "a", tmp_path / "b"
        write_d2pf(a, matrices)
        write_d2pf(b, matrices)
        assert a.read_bytes() == b.read_bytes()

    def test_thousand_records_match_checksums(self, tmp_path):
        # checksum oracle: crc32 per record computed at write time
        matrices = sample_matrices(1000, k=3, d=5, seed=1)
        checksums = {i: zlib.crc32(m.tobytes()) for i, m in matrices.items()}
        path = tmp_path / "big.d2pf"
        write_d2pf(path, matrices)
        for rec in read_d2pf(path):
            assert zlib.crc32(rec.matrix.astype("<f4").tobytes()) \
                == checksums[rec.sentence_id]

    def test_validate_reports_header(self, tmp_path):
        path = tmp_path / "v.d2pf"
        write_d2pf(path, sample_matrices(3, k=7, d=2))
        info = validate_d2pf(path)
        assert info == {"records": 3, "K": 7, "D": 2, "version": 1}


class TestErrorKinds:
    def write_sample(self, tmp_path):
        path = tmp_path / "x.d2pf"
        write_d2pf(path, sample_matrices(2))
        return path

    def test_truncation_by_one_byte(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(TruncatedFileError):
            read_d2pf(path)

    def test_bad_magic(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_d2pf(path)

    def test_version_mismatch(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 4, 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            read_d2pf(path)

    def test_nonincreasing_offsets(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = bytearray(path.read_bytes())
        # copy record 0's offset into record 1's index slot
        first_offset = struct.unpack_from("<Q", blob, 28 + 8)[0]
        struct.pack_into("<Q", blob, 28 + 16 + 8, first_offset)
        path.write_bytes(bytes(blob))
        with pytest.raises(IndexInconsistencyError):
            read_d2pf(path)

    def test_offset_into_index_rejected(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<Q", blob, 28 + 8, 4)
        path.write_bytes(bytes(blob))
        with pytest.raises(IndexInconsistencyError):
            read_d2pf(path)

    def test_header_shorter_than_fixed_size(self, tmp_path):
        path = tmp_path / "tiny"
        path.write_bytes(b"D2PF")
        with pytest.raises(TruncatedFileError):
            read_d2pf(path)

    def test_empty_write_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_d2pf(tmp_path / "none", {})

    def test_nonfinite_values_rejected(self, tmp_path):
        bad = {0: np.full((2, 2), np.nan, dtype=np.float32)}
        with pytest.raises(DataError):
            write_d2pf(tmp_path / "nan", bad)

    def test_shape_mismatch_rejected(self, tmp_path):
        bad = {0: np.zeros((2, 2), np.float32), 1: np.zeros((3, 2), np.float32)}
        with pytest.raises(DataError):
            write_d2pf(tmp_path / "mix", bad)


class TestFeatureRecord:
    def test_tag_validated(self):
        with pytest.raises(DataError):
            FeatureRecord(0, "synthetic", np.zeros((2, 2)))

    def test_records_to_dict(self):
        recs = [FeatureRecord(3, "authentic", np.ones((2, 2)))]
        assert 3 in records_to_dict(recs)
