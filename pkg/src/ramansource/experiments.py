"""Figure-level pipelines driven by a :class:`~ramansource.scenario.Scenario`.

Each ``run_*`` function returns a result object and knows nothing about
files; :mod:`ramansource.cli` writes the artifacts.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .correlator import (
    AccidentalsBudget,
    CorrelationHistogram,
    G1Summary,
    PairInterference,
    ScanResult,
    TwoPhotonResult,
    WavepacketEstimate,
    accidentals_budget,
    arrival_histogram,
    auto_window,
    calibrate_dark_rate,
    cross_correlate,
    fit_exponential_tail,
    g1_summary,
    hbt_coincidence_model,
    hom_coincidence_model,
    linearity_scan,
)
from .dynamics import (
    SequenceResult,
    TwoTimeCorrelation,
    simulate_sequence,
    two_time_correlation,
)
from .photostream import (
    DetectorModel,
    TimeTagStream,
    detect,
    route_two_sources,
    split_events,
)
from .scenario import Scenario
from .trajectories import quantum_jump_trajectories


def substream_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent 64-bit seeds derived from one scenario seed."""
    return [int(x) for x in np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)]


def _detector(scn: Scenario, i: int) -> DetectorModel:
    if not scn.detectors:
        raise ValueError("scenario has no detectors")
    return scn.detectors[min(i, len(scn.detectors) - 1)]


def regression_correlation(scn: Scenario, result: SequenceResult | None = None) -> TwoTimeCorrelation:
    """Two-time correlation over phase III on the scenario's correlation grid."""
    src = scn.source
    res = result or simulate_sequence(src, dt=scn.simulation.dt)
    a, b = src.sequence.emission_window
    dt = scn.simulation.correlation_dt
    grid = a + dt * np.arange(int(np.floor((b - a) / dt + 1e-9)) + 1)
    return two_time_correlation(src, grid, grid - a, res)


# -- populations -----------------------------------------------------------

@dataclass
class PopulationsRun:
    result: SequenceResult
    prepared_D: float  # D3/2 population at the end of phase II
    detected_probability: float


def run_populations(scn: Scenario) -> PopulationsRun:
    src = scn.source
    res = simulate_sequence(src, dt=scn.simulation.dt)
    t2 = src.sequence.emission_window[0]
    d = float(np.interp(t2, res.trace.times, res.trace.D))
    return PopulationsRun(res, d, res.detected_probability)


# -- wavepacket ------------------------------------------------------------

@dataclass
class WavepacketRun:
    estimate: WavepacketEstimate  # Monte Carlo histogram with its tail fit
    model_tau: np.ndarray
    model_rate: np.ndarray  # master-equation detected emission rate
    model_t1: float
    stream: TimeTagStream


def run_wavepacket(scn: Scenario) -> WavepacketRun:
    src = scn.source
    res = simulate_sequence(src, dt=scn.simulation.dt)
    s_mc, s_det = substream_seeds(scn.simulation.seed, 2)
    ev = quantum_jump_trajectories(src, scn.simulation.n_sequences, s_mc, res)
    stream = detect(ev, _detector(scn, 0), s_det, 0, scn.digest)
    a, b = src.sequence.emission_window
    wp = arrival_histogram(stream, a, scn.analysis.wavepacket_bin, length=b - a)
    m = (res.trace.times >= a) & (res.trace.times <= b)
    tau, rate = res.trace.times[m] - a, res.trace.emission_rate[m]
    win = scn.analysis.t1_window or auto_window(tau, rate)
    model = fit_exponential_tail((tau, rate), win)
    wp = replace(wp, fit=fit_exponential_tail(wp, win))
    return WavepacketRun(wp, tau, rate, model.t1, stream)


# -- Raman rate scan -------------------------------------------------------

def run_scan(scn: Scenario) -> ScanResult:
    if not scn.analysis.scan_rabi:
        raise ValueError("analysis.scan_rabi is empty")
    return linearity_scan(scn.source, scn.analysis.scan_rabi, scn.analysis.scan_reference,
                          scn.analysis.t1_window, scn.simulation.dt)


# -- click streams ---------------------------------------------------------

def run_trajectories(scn: Scenario) -> list[TimeTagStream]:
    """Click streams of one source; with two detectors the light is split 50/50."""
    src = scn.source
    s_mc, s_split, s_d0, s_d1 = substream_seeds(scn.simulation.seed, 4)
    ev = quantum_jump_trajectories(src, scn.simulation.n_sequences, s_mc)
    if len(scn.detectors) < 2:
        return [detect(ev, _detector(scn, 0), s_d0, 0, scn.digest)]
    e0, e1 = split_events(ev, s_split)
    return [detect(e0, scn.detectors[0], s_d0, 0, scn.digest), detect(e1, scn.detectors[1], s_d1, 1, scn.digest)]


# -- HBT -------------------------------------------------------------------

@dataclass
class HBTRun:
    histogram: CorrelationHistogram
    streams: tuple[TimeTagStream, TimeTagStream]
    peak_halfwidth: float
    central_counts: float
    side_counts: float  # mean of the two first side peaks
    predicted_central: float  # accidentals budget, counts
    budget: AccidentalsBudget


def peak_sum(h: CorrelationHistogram, center: float, halfwidth: float) -> float:
    return h.window_sum(center - halfwidth, center + halfwidth)


def run_hbt(scn: Scenario) -> HBTRun:
    src = scn.source
    res = simulate_sequence(src, dt=scn.simulation.dt)
    P = src.sequence.repetition_period
    a, b = src.sequence.emission_window
    hw = scn.analysis.peak_halfwidth or (b - a)
    s_mc, s_split, s_d0, s_d1 = substream_seeds(scn.simulation.seed, 4)
    ev = quantum_jump_trajectories(src, scn.simulation.n_sequences, s_mc, res)
    e0, e1 = split_events(ev, s_split)
    d0, d1 = _detector(scn, 0), _detector(scn, 1)
    st = (detect(e0, d0, s_d0, 0, scn.digest), detect(e1, d1, s_d1, 1, scn.digest))
    h = cross_correlate(st[0], st[1], scn.analysis.bin, scn.analysis.range)
    G = regression_correlation(scn, res)
    model = hbt_coincidence_model(G, (-hw, hw))
    bud = accidentals_budget(model, (d0, d1), P)
    side = 0.5 * (peak_sum(h, -P, hw) + peak_sum(h, P, hw))
    return HBTRun(h, st, hw, peak_sum(h, 0.0, hw), side, bud.total * scn.simulation.n_sequences, bud)


# -- two-source interference ----------------------------------------------

@dataclass
class HOMRun:
    model: TwoPhotonResult  # regression mode, signal only
    g1: G1Summary
    detectors: tuple[DetectorModel, DetectorModel]  # after dark-rate calibration
    budget: dict[str, AccidentalsBudget]
    model_contrast: float  # including dark counts and same-source doubles
    mc_ni: CorrelationHistogram | None = None
    mc_int: CorrelationHistogram | None = None
    mc_contrast: float | None = None
    mc_t1: float | None = None

    @property
    def t1(self) -> float:
        return self.model.t1


def calibrated_detectors(scn: Scenario, model: TwoPhotonResult) -> tuple[DetectorModel, DetectorModel]:
    d0, d1 = _detector(scn, 0), _detector(scn, 1)
    f = scn.analysis.dark_fraction
    if f is None:
        return d0, d1
    rate = 0.0 if f == 0 else calibrate_dark_rate(model.ni, d0, scn.sequence.repetition_period, f)
    return replace(d0, dark_rate=rate), replace(d1, dark_rate=rate)


def hom_monte_carlo(scn: Scenario, Ga: TwoTimeCorrelation, Gb: TwoTimeCorrelation,
                    detectors: tuple[DetectorModel, DetectorModel], overlaps: tuple[float, ...],
                    results: tuple[SequenceResult, SequenceResult] | None = None
                    ) -> list[CorrelationHistogram]:
    """Click-level coincidences of two sources behind a 50/50 splitter.

    Both ions are unraveled independently. A sequence with one photon from
    each ion is split across the outputs with the interference probability of
    :class:`~ramansource.correlator.PairInterference`; all other photons,
    including same-ion doubles, choose an output at random. The same
    emission records, routing uniforms and detector seeds serve every entry
    of ``overlaps``, so the histograms differ only through interference.
    """
    src = scn.source
    n = scn.simulation.n_sequences
    s = substream_seeds(scn.simulation.seed, 5)
    ra, rb = results or (None, None)
    ea = quantum_jump_trajectories(src, n, s[0], ra)
    eb = quantum_jump_trajectories(src, n, s[1], rb)
    out = []
    for ov in overlaps:
        o0, o1 = route_two_sources(ea, eb, PairInterference(Ga, Gb, ov), s[2], src.sequence.emission_window)
        c0 = detect(o0, detectors[0], s[3], 0, scn.digest)
        c1 = detect(o1, detectors[1], s[4], 1, scn.digest)
        out.append(cross_correlate(c0, c1, scn.analysis.bin, scn.analysis.range))
    return out


def run_hom(scn: Scenario, monte_carlo: bool = True) -> HOMRun:
    src = scn.source
    res = simulate_sequence(src, dt=scn.simulation.dt)
    G = regression_correlation(scn, res)
    model = hom_coincidence_model(G, G, scn.analysis.overlap, scn.analysis.t1_window, with_g1=False)
    g1 = g1_summary(G, scn.analysis.g1_window)
    model.g1 = g1
    dets = calibrated_detectors(scn, model)
    bud = accidentals_budget(model, dets, src.sequence.repetition_period)
    mc = 1.0 - bud["int"].total / bud["ni"].total if bud["ni"].total > 0 else 0.0
    run = HOMRun(model, g1, dets, bud, float(mc))
    if monte_carlo:
        h_ni, h_int = hom_monte_carlo(scn, G, G, dets, (0.0, scn.analysis.overlap), (res, res))
        lo, hi = model.central_window
        c_ni, c_int = h_ni.window_sum(lo, hi), h_int.window_sum(lo, hi)
        run.mc_ni, run.mc_int = h_ni, h_int
        run.mc_contrast = 1.0 - c_int / c_ni if c_ni > 0 else 0.0
        pos = h_ni.tau >= 0
        wp = WavepacketEstimate(h_ni.tau[pos], h_ni.counts[pos], h_ni.counts[pos], h_ni.bin_width)
        win = scn.analysis.t1_window or auto_window(wp.tau, wp.rate)
        try:
            run.mc_t1 = fit_exponential_tail(wp, win).t1
        except ValueError:
            run.mc_t1 = None
    return run


# -- first-order coherence -------------------------------------------------

def run_g1(scn: Scenario) -> G1Summary:
    return g1_summary(regression_correlation(scn), scn.analysis.g1_window)

