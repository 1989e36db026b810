import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ramansource.correlator import cross_correlate
from ramansource.photostream import (
    DetectorModel,
    EmissionEvent,
    EmissionRecord,
    TimeTagStream,
    detect,
    read_binary,
    read_csv,
    route_two_sources,
    split_events,
    split_hbt,
    write_binary,
    write_csv,
)

PERIOD = 2000.0


@st.composite
def records(draw, max_size=200, period=PERIOD):
    n_seq = draw(st.integers(1, 50))
    n = draw(st.integers(0, max_size))
    seq = np.sort(np.array(draw(st.lists(st.integers(0, n_seq - 1), min_size=n, max_size=n)), dtype=np.int64))
    t = np.array(draw(st.lists(st.floats(0, period, exclude_max=True), min_size=n, max_size=n)))
    det = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)), dtype=bool)
    return EmissionRecord(seq, t, np.zeros(n, dtype=np.int64), det, n_seq, period)


@st.composite
def streams(draw, max_size=200, resolution=1.0, detector_id=0):
    rec = draw(records(max_size))
    ticks = np.floor(rec.time / resolution).astype(np.int64)
    return TimeTagStream(detector_id, rec.sequence_index, ticks, rec.n_sequences, PERIOD, resolution, "abc")


def test_zero_efficiency_no_darks_is_empty():
    rec = EmissionRecord([0, 1], [10.0, 20.0], [0, 0], [True, True], 2, PERIOD)
    assert len(detect(rec, DetectorModel(efficiency=0.0), 1)) == 0


@given(records())
def test_identity_detector(rec):
    s = detect(rec, DetectorModel(), 3)
    sig = rec.detected_only()
    order = np.lexsort((sig.time, sig.sequence_index))
    assert np.array_equal(s.sequence_index, sig.sequence_index[order])
    # the quantizer adds 1e-9 ticks so exact grid values never floor one tick low
    assert np.array_equal(s.ticks, np.floor(sig.time[order] + 1e-9).astype(np.int64))


def test_dark_counts_are_poisson():
    det = DetectorModel(efficiency=1.0, dark_rate=1e-4, gate_windows=((100.0, 600.0),))
    empty = EmissionRecord([], [], [], [], 1000, PERIOD)
    mean = 1e-4 * 500.0 * 1000
    totals = np.array([len(detect(empty, det, s)) for s in range(300)])
    assert abs(totals.mean() - mean) < 5 * np.sqrt(mean / len(totals))
    assert totals.var() == pytest.approx(mean, rel=0.3)


@given(records(), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32))
def test_detect_is_monotone_in_efficiency(rec, e1, e2, seed):
    lo, hi = sorted((e1, e2))
    a = detect(rec, DetectorModel(efficiency=lo), seed)
    b = detect(rec, DetectorModel(efficiency=hi), seed)
    sa = set(zip(a.sequence_index.tolist(), a.ticks.tolist()))
    sb = set(zip(b.sequence_index.tolist(), b.ticks.tolist()))
    assert sa <= sb


@given(records(), st.integers(0, 2**32))
def test_detect_deterministic_and_gated(rec, seed):
    det = DetectorModel(0.7, 1e-3, ((100.0, 400.0), (900.0, 1500.0)), jitter_sigma=2.0, resolution=0.5)
    a = detect(rec, det, seed)
    b = detect(rec, det, seed)
    assert np.array_equal(a.ticks, b.ticks) and np.array_equal(a.sequence_index, b.sequence_index)
    assert np.all(det.in_gate(a.timestamp, PERIOD))


def test_quantization_floors():
    rec = EmissionRecord([0, 0, 0], [10.0, 10.99, 11.0], [0] * 3, [True] * 3, 1, PERIOD)
    s = detect(rec, DetectorModel(resolution=1.0), 0)
    assert s.ticks.tolist() == [10, 10, 11]


def test_detector_validation():
    with pytest.raises(ValueError, match="gate_windows overlap"):
        DetectorModel(gate_windows=((0, 100), (50, 200)))
    with pytest.raises(ValueError):
        DetectorModel(efficiency=1.5)
    with pytest.raises(ValueError, match="gate_windows"):
        DetectorModel(gate_windows=((0, 3000),)).validate_period(PERIOD)


def test_split_hbt_empty():
    s = TimeTagStream(0, [], [], 10, PERIOD)
    a, b = split_hbt(s, 1)
    assert len(a) == len(b) == 0


@given(streams(), st.integers(0, 2**32))
def test_split_hbt_preserves_union(s, seed):
    a, b = split_hbt(s, seed)
    assert len(a) + len(b) == len(s)
    merged = TimeTagStream.merge([a, b], 0)
    assert np.array_equal(merged.ticks, s.ticks) and np.array_equal(merged.sequence_index, s.sequence_index)
    assert (a.detector_id, b.detector_id) == (0, 1)


def test_split_hbt_is_binomial():
    s = TimeTagStream(0, np.arange(20000) // 10, np.arange(20000) % 10 * 100, 2000, PERIOD)
    ks = [len(split_hbt(s, seed)[0]) for seed in range(50)]
    assert abs(np.mean(ks) - 10000) < 5 * np.sqrt(5000 / 50)


def test_split_single_photons_never_coincide():
    rng = np.random.default_rng(0)
    s = TimeTagStream(0, np.arange(5000), rng.integers(1400, 2000, 5000), 5000, PERIOD)
    a, b = split_hbt(s, 4)
    h = cross_correlate(a, b, 50.0, (-5000.0, 5000.0))
    assert h.counts[h.tau == 0][0] == 0
    assert h.counts[h.tau == 2000][0] > 0


@given(records(), st.integers(0, 2**32))
def test_split_events_partition(rec, seed):
    a, b = split_events(rec, seed)
    assert len(a) + len(b) == int(rec.detected.sum())


def test_two_source_routing_limits():
    n = 4000
    a = EmissionRecord(np.arange(n), np.full(n, 1500.0), np.zeros(n), np.ones(n, bool), n, PERIOD)
    b = EmissionRecord(np.arange(n), np.full(n, 1500.0), np.zeros(n), np.ones(n, bool), n, PERIOD)
    # perfect interference: both photons always leave together
    o0, o1 = route_two_sources(a, b, lambda ta, tb: np.zeros_like(ta), 1)
    c0 = np.bincount(o0.sequence_index, minlength=n)
    assert set(c0.tolist()) <= {0, 2}
    # no interference: split half the time
    o0, o1 = route_two_sources(a, b, lambda ta, tb: np.full_like(ta, 0.5), 1)
    c0 = np.bincount(o0.sequence_index, minlength=n)
    assert abs(np.mean(c0 == 1) - 0.5) < 5 * np.sqrt(0.25 / n)
    assert len(o0) + len(o1) == 2 * n


@given(streams(resolution=1.0))
def test_csv_round_trip(tmp_path_factory, s):
    path = tmp_path_factory.mktemp("csv") / "s.csv"
    write_csv(s, path)
    (back,) = read_csv(path)
    assert np.array_equal(back.ticks, s.ticks) and np.array_equal(back.sequence_index, s.sequence_index)
    assert (back.n_sequences, back.repetition_period, back.resolution, back.digest) == (
        s.n_sequences, s.repetition_period, s.resolution, s.digest)


@given(streams(resolution=0.25))
def test_binary_round_trip(tmp_path_factory, s):
    path = tmp_path_factory.mktemp("bin") / "s.bin"
    write_binary(s, path)
    back = read_binary(path)
    assert np.array_equal(back.ticks, s.ticks) and np.array_equal(back.sequence_index, s.sequence_index)
    assert (back.n_sequences, back.repetition_period, back.resolution, back.digest) == (
        s.n_sequences, s.repetition_period, s.resolution, s.digest)


def test_binary_layout(tmp_path):
    s = TimeTagStream(3, [1, 2], [5, 7], 4, PERIOD, 1.0, "d")
    write_binary(s, tmp_path / "x.bin")
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:4] == b"RPST"
    body = raw[-24:]
    assert int.from_bytes(body[0:4], "little") == 1 and int.from_bytes(body[4:12], "little") == 5
    assert int.from_bytes(body[12:16], "little") == 2 and int.from_bytes(body[16:24], "little") == 7


def test_csv_missing_metadata(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("detector_id,sequence_index,timestamp_ns\n")
    with pytest.raises(ValueError, match="n_sequences|repetition_period"):
        read_csv(p)


def test_event_views():
    rec = EmissionRecord.from_events([EmissionEvent(0, 5.0, 1, True), EmissionEvent(1, 7.0, 2, False)], 2, PERIOD)
    assert rec[1] == EmissionEvent(1, 7.0, 2, False)
    assert list(rec)[0].detected_flag
    with pytest.raises(ValueError):
        EmissionRecord([0], [PERIOD], [0], [True], 1, PERIOD)


def test_stream_sorted_on_construction():
    s = TimeTagStream(0, [2, 0, 0], [1, 9, 3], 3, PERIOD)
    assert s.records == [(0, 3.0), (0, 9.0), (2, 1.0)]
