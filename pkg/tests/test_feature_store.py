import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featgen import feature_store as fs
from featgen.data import Label


def random_records(n, dims=(4, 5, 5), seed=0):
    rng = np.random.default_rng(seed)
    return [
        fs.FeatureMap(
            data=rng.standard_normal(dims).astype(np.float32),
            label=Label(int(rng.integers(0, 2))),
            source=fs.Source(int(rng.integers(0, 2))),
            parent_id=f"rec-{i}",
        )
        for i in range(n)
    ]


class TestRoundTrip:
    def test_empty_store(self, tmp_path):
        path = tmp_path / "empty.fgen"
        assert fs.write_store(path, []) == 0
        assert fs.read_store(path) == []
        assert path.stat().st_size == 28  # header only: 4 + 4 + 8 + 3*4

    def test_file_size_arithmetic(self, tmp_path):
        rec = fs.FeatureMap(np.ones((2, 3, 3), np.float32), Label.HGG, fs.Source.REAL, "abc")
        path = tmp_path / "one.fgen"
        fs.write_store(path, [rec])
        assert path.stat().st_size == 28 + 2 + 2 + 3 + 4 * 2 * 3 * 3

    def test_round_trip_bit_exact(self, tmp_path):
        records = random_records(100)
        path = tmp_path / "r.fgen"
        assert fs.write_store(path, records) == 100
        back = fs.read_store(path)
        assert len(back) == 100
        for a, b in zip(records, back):
            assert a.data.tobytes() == b.data.tobytes()
            assert (a.label, a.source, a.parent_id) == (b.label, b.source, b.parent_id)

    def test_heterogeneous_shapes_rejected(self, tmp_path):
        records = [
            fs.FeatureMap(np.zeros((2, 2, 2), np.float32), Label.HGG, fs.Source.REAL, "a"),
            fs.FeatureMap(np.zeros((2, 2, 3), np.float32), Label.HGG, fs.Source.REAL, "b"),
        ]
        with pytest.raises(ValueError):
            fs.write_store(tmp_path / "x.fgen", records)

    @given(n=st.integers(0, 5), seed=st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, n, seed):
        path = tmp_path_factory.mktemp("prop") / "p.fgen"
        records = random_records(n, dims=(2, 3, 3), seed=seed)
        fs.write_store(path, records)
        back = fs.read_store(path)
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(records, back))


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fgen"
        fs.write_store(path, random_records(1))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(fs.BadMagicError, match="bad magic"):
            fs.read_store(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ver.fgen"
        fs.write_store(path, random_records(1))
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(fs.VersionMismatchError, match="version mismatch"):
            fs.read_store(path)

    def test_truncated_payload_names_record(self, tmp_path):
        path = tmp_path / "trunc.fgen"
        fs.write_store(path, random_records(3))
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])  # chop the last record's payload
        with pytest.raises(fs.TruncatedStoreError, match="record 2"):
            fs.read_store(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "hdr.fgen"
        path.write_bytes(b"FGEN\x01")
        with pytest.raises(fs.TruncatedStoreError):
            fs.read_store(path)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            fs.FeatureMap(np.full((1, 2, 2), np.nan, np.float32), Label.HGG,
                          fs.Source.REAL, "n")


class TestInspect:
    def test_counts(self, tmp_path):
        records = [
            fs.FeatureMap(np.zeros((1, 2, 2), np.float32), Label.HGG, fs.Source.REAL, "a"),
            fs.FeatureMap(np.zeros((1, 2, 2), np.float32), Label.LGG, fs.Source.SYNTHETIC, "b"),
            fs.FeatureMap(np.zeros((1, 2, 2), np.float32), Label.LGG, fs.Source.REAL, "c"),
        ]
        path = tmp_path / "i.fgen"
        fs.write_store(path, records)
        info = fs.inspect_store(path)
        assert info["record_count"] == 3
        assert info["dims"] == [1, 2, 2]
        assert info["by_label"] == {"HGG": 1, "LGG": 2}
        assert info["by_source"] == {"REAL": 2, "SYNTHETIC": 1}
