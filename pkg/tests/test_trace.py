import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colocate import trace as tr
from colocate.trace import GroundTruth, Trace, TraceFormatError


def _truthful(n=100):
    truth = GroundTruth((3, 40), (bytes(16), bytes(range(16))), bytes(range(16, 32)))
    return Trace.from_samples(np.linspace(-1, 1, n), "aes128", rd_max=4, seed=7, truth=truth)


def test_window_count_example():
    assert tr.window_count(10_000, 1_000, 100) == 91
    assert len(tr.slice_windows(np.zeros(10_000), 1_000, 100)) == 91


@given(st.integers(1, 500), st.integers(1, 60), st.integers(1, 30))
def test_slice_windows_origins_and_count(length, n, s):
    if n > length:
        with pytest.raises(ValueError):
            tr.slice_windows(np.arange(length), n, s)
        return
    x = np.arange(length, dtype=float)
    w = tr.slice_windows(x, n, s)
    assert len(w) == tr.window_count(length, n, s)
    assert np.all(w[:, 0] == np.arange(len(w)) * s)
    assert w[-1, -1] < length


def test_slice_returns_windows():
    t = Trace.from_samples(np.arange(10.0))
    ws = tr.slice(t, 4, 3)
    assert [w.origin for w in ws] == [0, 3, 6]
    assert ws[1].values.tolist() == [3, 4, 5, 6]


def test_trace_invariants():
    with pytest.raises(ValueError):
        Trace.from_samples([])
    with pytest.raises(ValueError):
        Trace(np.zeros(5), tr.TraceMeta(4, "x"))
    with pytest.raises(ValueError):
        Trace.from_samples(np.zeros(5), truth=GroundTruth((7,), ()))
    with pytest.raises(ValueError):
        GroundTruth((5, 5), ())
    with pytest.raises(ValueError):
        GroundTruth((1,), (b"short",))
    t = _truthful()
    assert t.blind().meta.truth is None
    assert not t.samples.flags.writeable


def test_class_label_one_hot():
    assert tr.ClassLabel.C1.one_hot.tolist() == [0.0, 1.0]


def test_trace_round_trip(tmp_path):
    t = _truthful()
    path = tmp_path / "a.sctr"
    tr.write_trace(t, path)
    back = tr.read_trace(path)
    np.testing.assert_array_equal(back.samples, t.samples.astype(np.float32))
    assert back.meta == t.meta
    raw = path.read_bytes()
    assert raw[:4] == b"SCTR" and len(raw) == 16 + 4 * 100
    assert struct.unpack("<Q", raw[8:16])[0] == 100


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=200))
def test_round_trip_is_exact_for_f32_values(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "t.sctr"
    t = Trace.from_samples(np.array(values, dtype=np.float32))
    tr.write_trace(t, path)
    assert tr.read_trace(path) == t


def test_blind_trace_has_no_sidecar_truth(tmp_path):
    path = tmp_path / "b.sctr"
    tr.write_trace(_truthful(), path)
    tr.sidecar_path(path).unlink()
    back = tr.read_trace(path)
    assert back.meta.truth is None and back.meta.profile_name == "unknown"


@pytest.mark.parametrize("damage, message", [
    (lambda raw: b"XXXX" + raw[4:], "magic"),
    (lambda raw: raw[:4] + b"\x02" + raw[5:], "version"),
    (lambda raw: raw[:5] + b"\x01" + raw[6:], "dtype"),
    (lambda raw: raw[:10], "truncated"),
    (lambda raw: raw[:-2], "payload"),
])
def test_corrupt_files_raise(tmp_path, damage, message):
    path = tmp_path / "c.sctr"
    tr.write_trace(_truthful(), path)
    path.write_bytes(damage(path.read_bytes()))
    with pytest.raises(TraceFormatError, match=message):
        tr.read_trace(path)


def test_bad_sidecar_raises(tmp_path):
    path = tmp_path / "d.sctr"
    tr.write_trace(_truthful(), path)
    tr.sidecar_path(path).write_text("{not json")
    with pytest.raises(TraceFormatError):
        tr.read_trace(path)
    tr.sidecar_path(path).write_text(json.dumps({"profile_name": "x", "starts": [500]}))
    with pytest.raises(TraceFormatError):
        tr.read_trace(path)


def test_nonfinite_samples_are_not_written(tmp_path):
    with pytest.raises(ValueError):
        tr.write_trace(Trace.from_samples([1.0, np.inf]), tmp_path / "e.sctr")


def test_block_round_trip(tmp_path):
    seg = np.arange(12.0).reshape(3, 4)
    path = tmp_path / "blk.sctm"
    meta = tr.TraceMeta(12, "aes128", truth=GroundTruth((0, 5, 9), (bytes(16),) * 3, bytes(16)))
    tr.write_block(seg, path, meta)
    back, m = tr.read_block(path)
    np.testing.assert_array_equal(back, seg)
    assert m.truth.starts == (0, 5, 9)
    with pytest.raises(TraceFormatError):
        tr.read_trace(path)


def test_trace_paths_sorted(tmp_path):
    for name in ("b", "a"):
        tr.write_trace(Trace.from_samples([1.0]), tmp_path / f"{name}.sctr")
    assert [p.name for p in tr.trace_paths(tmp_path)] == ["a.sctr", "b.sctr"]
