"""Trace file round-trips and malformed-input diagnostics."""

import hashlib

import numpy as np
import pytest

from kvsim.traceio import Trace, TraceError, read_trace, synthetic_trace, write_trace


def file_sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestRoundTrip:
    def test_small_trace(self, tmp_path):
        trace = synthetic_trace(4, 2, seed=0)
        path = tmp_path / "small.trace"
        write_trace(trace, path)
        back = read_trace(path)
        assert back.M == 4 and back.T == 2
        assert np.array_equal(back.prefill_scores, trace.prefill_scores)
        for a, b in zip(back.rows, trace.rows):
            assert np.array_equal(a, b)

    def test_long_trace_hash_identical_after_round_trip(self, tmp_path):
        trace = synthetic_trace(3, 1000, seed=7)
        first = tmp_path / "first.trace"
        second = tmp_path / "second.trace"
        write_trace(trace, first)
        write_trace(read_trace(first), second)
        assert file_sha256(first) == file_sha256(second)

    def test_synthetic_traces_deterministic(self):
        a = synthetic_trace(6, 9, seed=3)
        b = synthetic_trace(6, 9, seed=3)
        assert np.array_equal(a.prefill_scores, b.prefill_scores)
        for ra, rb in zip(a.rows, b.rows):
            assert np.array_equal(ra, rb)


class TestErrors:
    def write_good(self, tmp_path):
        path = tmp_path / "good.trace"
        write_trace(synthetic_trace(4, 3, seed=0), path)
        return path

    def test_corrupt_last_line_names_line_number(self, tmp_path):
        path = self.write_good(tmp_path)
        lines = path.read_text().splitlines()
        lines[-1] = lines[-1][: len(lines[-1]) // 2]  # truncate mid-record
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceError, match=f"line {len(lines)}"):
            read_trace(path)

    def test_version_mismatch(self, tmp_path):
        path = self.write_good(tmp_path)
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace('"version": 1', '"version": 9')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceError, match="version"):
            read_trace(path)

    def test_truncated_file(self, tmp_path):
        path = self.write_good(tmp_path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(TraceError, match="truncated"):
            read_trace(path)

    def test_row_length_inconsistent_with_causal_growth(self, tmp_path):
        path = self.write_good(tmp_path)
        lines = path.read_text().splitlines()
        lines[2] = '{"t": 1, "scores": [0.5, 0.5]}'
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceError, match="causal growth"):
            read_trace(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.trace"
        path.write_text("")
        with pytest.raises(TraceError, match="empty"):
            read_trace(path)

    def test_construction_validates_shapes(self):
        with pytest.raises(TraceError, match="prompt score row"):
            Trace(M=4, T=0, prefill_scores=np.ones(3), rows=[])
        with pytest.raises(TraceError, match="expected M"):
            Trace(M=2, T=1, prefill_scores=np.ones(2), rows=[np.ones(5)])

    def test_row_access_bounds(self):
        trace = synthetic_trace(4, 3, seed=1)
        with pytest.raises(TraceError, match="outside"):
            trace.row(4)
