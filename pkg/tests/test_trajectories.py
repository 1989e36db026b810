import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from ramansource.atom import AtomModel, LaserField
from ramansource.dynamics import Phase, PulseSequence, Source
from ramansource.trajectories import (
    counter_uniforms,
    quantum_jump_trajectories,
    trajectory_populations,
)


def _expected_counts(result, edges, n):
    tr = result.trace
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = (tr.times >= a) & (tr.times <= b)
        out.append(np.trapezoid(tr.emission_rate[m], tr.times[m]))
    return np.array(out) * n


@pytest.fixture(scope="module")
def mc_events(source, source_result):
    return quantum_jump_trajectories(source, 100_000, 2024, source_result)


def test_arrival_times_match_master_equation(mc_events, source_result):
    d = mc_events.detected_only()
    edges = np.arange(1400.0, 2000.0 + 1e-9, 20.0)
    h, _ = np.histogram(d.time, edges)
    exp = _expected_counts(source_result, edges, 100_000)
    stat = float(np.sum((h - exp) ** 2 / exp))
    p = chi2.sf(stat, len(h))
    print(f"chi2 {stat:.1f} / {len(h)} bins, p = {p:.3f}")
    assert p > 0.01


def test_at_most_one_raman_photon_without_leakage(mc_events):
    d = mc_events.detected_only()
    m = d.time >= 1400.0
    counts = np.bincount(d.sequence_index[m], minlength=mc_events.n_sequences)
    assert counts.max() <= 1


def test_leakage_gives_double_emission(leaky_source):
    ev = quantum_jump_trajectories(leaky_source, 20_000, 9).detected_only()
    m = ev.time >= 1400.0
    counts = np.bincount(ev.sequence_index[m], minlength=20_000)
    assert counts.max() >= 2


def test_no_repump_no_raman_photons():
    atom = AtomModel()
    g = atom.gamma_P
    seq = PulseSequence((Phase(400, 0.1, 1.0), Phase(1000, 1.0, 0.0), Phase(600, 0.0, 0.0)), 2000.0)
    src = Source(atom, (LaserField("blue_397", 6 * g, -1.5 * g), LaserField("ir_866", 1.5 * g, -0.35)), seq)
    ev = quantum_jump_trajectories(src, 20_000, 5).detected_only()
    # P population left by the pump decays within a few 1/gamma_P of the boundary
    assert np.sum(ev.time >= 1400.0 + 100.0) == 0


def test_population_average_law(source, source_result):
    times = np.arange(0.0, 2000.0, 50.0)
    avg = trajectory_populations(source, 10_000, 77, times, source_result)
    ref = source_result.trace.populations[np.searchsorted(source_result.trace.times, times)]
    err = np.maximum(avg.stderr, 1.0 / avg.n_sequences)
    assert np.all(np.abs(avg.mean - ref) <= 5 * err)


def test_reproducible_and_thread_independent(source, source_result):
    a = quantum_jump_trajectories(source, 5000, 11, source_result, threads=1)
    b = quantum_jump_trajectories(source, 5000, 11, source_result, threads=3)
    assert np.array_equal(a.sequence_index, b.sequence_index)
    assert np.array_equal(a.time, b.time)
    assert np.array_equal(a.channel, b.channel)
    c = quantum_jump_trajectories(source, 5000, 12, source_result, threads=1)
    assert not np.array_equal(a.time, c.time)


def test_sequences_are_order_independent(source, source_result):
    whole = quantum_jump_trajectories(source, 3000, 4, source_result)
    tail = quantum_jump_trajectories(source, 1000, 4, source_result, first_sequence=2000)
    m = whole.sequence_index >= 2000
    assert np.array_equal(whole.time[m], tail.time)


def test_event_invariants(mc_events):
    assert np.all((mc_events.time >= 0) & (mc_events.time < mc_events.repetition_period))
    assert np.all(np.diff(mc_events.sequence_index) >= 0)


@settings(max_examples=20)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**40))
def test_counter_uniforms_in_unit_interval(seed, index):
    u = counter_uniforms(seed, index, 64)
    assert np.all((u >= 0) & (u < 1))
    assert np.array_equal(u, counter_uniforms(seed, index, 64))


def test_counter_uniforms_look_uniform():
    u = np.concatenate([counter_uniforms(7, i, 100) for i in range(200)])
    h, _ = np.histogram(u, 20, (0, 1))
    assert chi2.sf(np.sum((h - 1000) ** 2 / 1000), 19) > 1e-3


def test_rejects_empty_run(source):
    with pytest.raises(ValueError):
        quantum_jump_trajectories(source, 0, 1)
