"""Arrival-time histograms, coincidence correlations, exponential fits, the
two-source interference model and first-order coherence summaries."""
from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .atom import (
    DETECTED_CHANNEL,
    LEVELS,
    N_LEVELS,
    AtomModel,
    LaserField,
    Manifold,
    Transition,
    build_level_table,
    cg_table,
)
from .photostream import DetectorModel, TimeTagStream


class FitError(ValueError):
    """Raised when a fit is singular or has too little data."""

    def __init__(self, message: str, residuals: np.ndarray | None = None):
        super().__init__(message)
        self.residuals = residuals


# -- histograms of time tags ----------------------------------------------

@dataclass
class CorrelationHistogram:
    tau: np.ndarray  # bin centers, ns
    bin_width: float
    range: tuple[float, float]
    counts: np.ndarray
    errors: np.ndarray
    expected: np.ndarray | None = None  # uncorrelated-pair expectation per bin
    reference: float | None = None  # uncorrelated expectation in the zero-delay bin
    normalization: str = "raw"
    mode: str = "monte_carlo"

    @property
    def norm(self) -> np.ndarray:
        if self.reference is None or self.reference <= 0:
            return np.full(self.counts.shape, np.nan)
        return self.counts / self.reference

    @property
    def norm_errors(self) -> np.ndarray:
        if self.reference is None or self.reference <= 0:
            return np.full(self.counts.shape, np.nan)
        return self.errors / self.reference

    def window_sum(self, lo: float, hi: float) -> float:
        m = (self.tau >= lo - 1e-9) & (self.tau <= hi + 1e-9)
        return float(self.counts[m].sum())


def _bin_ticks(stream: TimeTagStream, width: float, name: str) -> int:
    b = width / stream.resolution
    if not width > 0 or abs(b - round(b)) > 1e-9:
        raise ValueError(f"{name} must be a positive multiple of the resolution")
    return int(round(b))


def _pair_counts(t1: np.ndarray, t2: np.ndarray, B: int, kmin: int, kmax: int) -> np.ndarray:
    """Counts of t2 - t1 in bins centered on k*B (k = kmin..kmax), half-open [kB - B/2, kB + B/2)."""
    nb = kmax - kmin + 1
    out = np.zeros(nb, dtype=np.int64)
    if len(t1) == 0 or len(t2) == 0 or nb <= 0:
        return out
    # d in bin k  <=>  (2k - 1) B <= 2d < (2k + 1) B
    lo_d = -((-(2 * kmin - 1) * B) // 2)  # ceil
    hi_d = -((-(2 * kmax + 1) * B) // 2)  # first excluded d (ceil)
    lo = np.searchsorted(t2, t1 + lo_d, side="left")
    hi = np.searchsorted(t2, t1 + hi_d, side="left")
    n = hi - lo
    total = int(n.sum())
    if total == 0:
        return out
    # enumerate pairs in chunks to bound memory
    chunk = 1 << 22
    starts = np.concatenate([[0], np.cumsum(n)])
    i0 = 0
    while i0 < len(t1):
        i1 = int(np.searchsorted(starts, starts[i0] + chunk, side="right")) - 1
        i1 = max(i1, i0 + 1)
        cnt = n[i0:i1]
        m = int(cnt.sum())
        if m:
            rep = np.repeat(np.arange(i0, i1), cnt)
            offs = np.arange(m) - np.repeat(starts[i0:i1] - starts[i0], cnt)
            d = t2[lo[rep] + offs] - t1[rep]
            k = (2 * d + B) // (2 * B)
            out += np.bincount(k - kmin, minlength=nb)[:nb]
        i0 = i1
    return out


def _phase_histogram(stream: TimeTagStream) -> np.ndarray:
    return np.bincount(stream.ticks, minlength=stream.period_ticks)[: stream.period_ticks].astype(float)


def _uncorrelated_expectation(s1: TimeTagStream, s2: TimeTagStream, B: int, ks: np.ndarray) -> np.ndarray:
    """Expected pair counts per bin for uncorrelated sequences.

    Uses per-phase rate products of the two streams, which is what the average
    over shifted sequence pairs (i, i+k), k != 0, estimates.
    """
    P = s1.period_ticks
    n = s1.n_sequences
    h1 = _phase_histogram(s1)
    h2 = _phase_histogram(s2)
    # C[d] = sum_x h1[x] h2[(x + d) mod P]
    C = np.fft.irfft(np.conj(np.fft.rfft(h1)) * np.fft.rfft(h2), P)
    C = np.maximum(C, 0.0)
    out = np.empty(len(ks))
    for i, k in enumerate(ks):
        lo = -((-(2 * k - 1) * B) // 2)
        hi = -((-(2 * k + 1) * B) // 2)
        d = np.arange(lo, hi)
        # fraction of sequence pairs available at this offset
        avail = np.clip(n - np.abs(d) / P, 0.0, None)
        out[i] = float(np.sum(C[d % P] * avail)) / (n * n)
    return out


def cross_correlate(s1: TimeTagStream, s2: TimeTagStream, bin: float, range: tuple[float, float],
                    normalize: bool = True, shard_sequences: int | None = None) -> CorrelationHistogram:
    """Histogram of all pairwise delays t2 - t1 within ``range``.

    Bins are centered on multiples of ``bin``; pairs are found with a sorted
    sweep (searchsorted), never by testing all pairs. With ``shard_sequences``
    the first stream is processed in blocks of sequence indices and bins are
    added, which gives the same integers as the unsharded call.
    """
    if not s1.compatible(s2):
        raise ValueError("streams differ in repetition period, resolution or sequence count")
    B = _bin_ticks(s1, bin, "bin")
    tmin, tmax = range
    if tmax < tmin:
        raise ValueError("range must satisfy tau_min <= tau_max")
    kmin = int(np.ceil(tmin / bin - 1e-9))
    kmax = int(np.floor(tmax / bin + 1e-9))
    a1 = s1.absolute_ticks()
    a2 = s2.absolute_ticks()
    if shard_sequences:
        counts = np.zeros(max(kmax - kmin + 1, 0), dtype=np.int64)
        edges = np.arange(0, s1.n_sequences + shard_sequences, shard_sequences)
        cut = np.searchsorted(s1.sequence_index, edges)
        for a, b in zip(cut[:-1], cut[1:]):
            counts += _pair_counts(a1[a:b], a2, B, kmin, kmax)
    else:
        counts = _pair_counts(a1, a2, B, kmin, kmax)
    ks = np.arange(kmin, kmax + 1)
    hist = CorrelationHistogram(ks * bin, float(bin), (float(tmin), float(tmax)), counts.astype(float),
                                np.sqrt(counts.astype(float)))
    if normalize and len(s1) and len(s2):
        hist.expected = _uncorrelated_expectation(s1, s2, B, ks)
        hist.reference = float(_uncorrelated_expectation(s1, s2, B, np.array([0]))[0])
        hist.normalization = "per_pair_rate"
    return hist


def brute_force_histogram(s1: TimeTagStream, s2: TimeTagStream, bin: float,
                          range: tuple[float, float]) -> np.ndarray:
    """All-pairs reference implementation (tests only; O(n1 n2))."""
    B = _bin_ticks(s1, bin, "bin")
    kmin = int(np.ceil(range[0] / bin - 1e-9))
    kmax = int(np.floor(range[1] / bin + 1e-9))
    out = np.zeros(kmax - kmin + 1, dtype=np.int64)
    for x in s1.absolute_ticks().tolist():
        for y in s2.absolute_ticks().tolist():
            k = (2 * (y - x) + B) // (2 * B)
            if kmin <= k <= kmax:
                out[k - kmin] += 1
    return out


# -- wavepackets and exponential fits -------------------------------------

@dataclass
class ExpFit:
    gamma: float  # 1/ns
    t1: float  # ns
    gamma_err: float
    t1_err: float
    covariance: np.ndarray  # of (log amplitude, -gamma)
    window: tuple[float, float]
    residuals: np.ndarray
    r2: float


@dataclass
class WavepacketEstimate:
    tau: np.ndarray  # bin starts relative to the trigger, ns
    rate: np.ndarray  # photons / ns / sequence
    counts: np.ndarray | None = None
    bin: float | None = None
    fit: ExpFit | None = None

    @property
    def gamma(self) -> float | None:
        return None if self.fit is None else self.fit.gamma

    @property
    def t1(self) -> float | None:
        return None if self.fit is None else self.fit.t1

    @property
    def window(self) -> tuple[float, float] | None:
        return None if self.fit is None else self.fit.window

    @property
    def covariance(self) -> np.ndarray | None:
        return None if self.fit is None else self.fit.covariance

    def with_fit(self, window: tuple[float, float] | None = None) -> WavepacketEstimate:
        if window is None:
            window = auto_window(self.tau, self.rate)
        return replace(self, fit=fit_exponential_tail(self, window))


def arrival_histogram(stream: TimeTagStream, trigger_offset: float, bin: float,
                      length: float | None = None) -> WavepacketEstimate:
    """Histogram of (timestamp - trigger_offset) mod period over [0, length).

    ``length`` defaults to the full period; pass the phase III duration to
    restrict to the emission phase.
    """
    if not bin > 0:
        raise ValueError("bin must be positive")
    period = stream.repetition_period
    length = period if length is None else float(length)
    nb = int(np.ceil(length / bin - 1e-9))
    tau = np.arange(nb) * bin
    if len(stream) == 0 or stream.n_sequences == 0:
        counts = np.zeros(nb)
    else:
        x = np.mod(stream.timestamp - trigger_offset, period)
        x = x[x < length]
        counts = np.bincount(np.floor(x / bin + 1e-9).astype(np.int64), minlength=nb)[:nb].astype(float)
    rate = counts / (max(stream.n_sequences, 1) * bin)
    return WavepacketEstimate(tau, rate, counts, float(bin))


def auto_window(tau: np.ndarray, rate: np.ndarray, hi: float = 0.6, lo: float = 0.1,
                skip: float = 50.0) -> tuple[float, float]:
    """Tail window from where the rate has fallen to ``hi`` of its peak to
    where it reaches ``lo`` of its peak (or the data end).

    The first ``skip`` ns are ignored when locating the peak, so a switching
    transient at the trigger does not set the scale.
    """
    tau = np.asarray(tau, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if len(rate) == 0 or not np.any(rate > 0):
        raise FitError("no signal to choose a fit window from")
    k0 = int(np.searchsorted(tau, tau[0] + skip))
    if k0 >= len(rate) - 5:
        k0 = 0
    k = k0 + int(np.argmax(rate[k0:]))
    peak = rate[k]
    after = np.nonzero(rate[k:] <= hi * peak)[0]
    a = k + (after[0] if len(after) else 0)
    below = np.nonzero(rate[a:] <= lo * peak)[0]
    b = a + below[0] if len(below) else len(rate) - 1
    return float(tau[a]), float(tau[b])


def fit_exponential_tail(wp: WavepacketEstimate | tuple[np.ndarray, np.ndarray], window: tuple[float, float],
                         weights: np.ndarray | None = None) -> ExpFit:
    """Weighted least squares of log(rate) against tau inside ``window``.

    With counts available the weights are the counts (var log r ~ 1/N) and
    the covariance is absolute; otherwise weights are uniform and the
    covariance is scaled by the residual variance.
    """
    if isinstance(wp, WavepacketEstimate):
        tau, rate, counts = wp.tau, wp.rate, wp.counts
    else:
        tau, rate = (np.asarray(a, dtype=float) for a in wp)
        counts = None
    a, b = window
    m = (tau >= a - 1e-9) & (tau <= b + 1e-9) & (rate > 0)
    if counts is not None:
        m &= counts > 0
    if m.sum() < 5:
        raise FitError(f"fewer than 5 non-empty bins in window {window}")
    x = tau[m]
    if np.ptp(x) == 0:
        raise FitError("all tau values equal")
    y = np.log(rate[m])
    if weights is not None:
        w = np.asarray(weights, dtype=float)[m]
        absolute = False
    elif counts is not None:
        w = counts[m]
        absolute = True
    else:
        w = np.ones_like(x)
        absolute = False
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    M = XtW @ X
    if np.linalg.cond(M) > 1e14:
        raise FitError("singular fit")
    beta = np.linalg.solve(M, XtW @ y)
    res = y - X @ beta
    cov = np.linalg.inv(M)
    if not absolute:
        dof = max(len(x) - 2, 1)
        cov = cov * float(np.sum(w * res**2) / dof)
    gamma = -beta[1]
    if not gamma > 0:
        raise FitError(f"fitted rate is not positive ({gamma:.3g} /ns)", res)
    ge = float(np.sqrt(max(cov[1, 1], 0.0)))
    ybar = np.average(y, weights=w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * res**2)) / ss_tot if ss_tot > 0 else 1.0
    return ExpFit(float(gamma), float(1 / gamma), ge, ge / gamma**2, cov, (float(a), float(b)), res, r2)


# -- Raman rate scan -------------------------------------------------------

def _ir_coupling(atom: AtomModel, ir: LaserField, scale: float) -> np.ndarray:
    """V_+ (D -> P) part of the IR interaction at the given amplitude scale."""
    table = cg_table(atom)
    chans = {k: v for k, v in table.items() if LEVELS[k[1]][0] is Manifold.D32}
    strongest = max(abs(v.amplitude) for v in chans.values())
    v = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
    for (u, l), e in chans.items():
        v[u, l] = 0.5 * scale * ir.rabi_peak * ir.polarization[e.polarization.value + 1] * e.amplitude / strongest
    return v


def effective_operators(atom: AtomModel, ir: LaserField, scale: float = 1.0):
    """Adiabatic elimination of P1/2 under the repumper alone.

    Effective-operator form: with H_NH = H_P - (i/2) sum L^dag L on the P
    block (energies relative to the D centre of mass),
    H_eff = -1/2 V_- (H_NH^-1 + h.c.) V_+ + H_D and L_eff = L H_NH^-1 V_+.
    Returns (H_eff, [L_eff], index of the detected channel). The low-intensity
    rate of each D -> P channel reduces to Omega^2 gamma_P / (4 delta^2 + gamma_P^2).
    """
    levels = build_level_table(atom)
    vp = _ir_coupling(atom, ir, scale)
    ops = []
    for (u, l), e in sorted(cg_table(atom).items()):
        branch = atom.gamma_PS if LEVELS[l][0] is Manifold.S12 else atom.gamma_PD
        L = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
        L[l, u] = np.sqrt(branch * e.amplitude**2)
        ops.append(((u, l), L))
    h_nh = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
    for lv in levels:
        if lv.manifold is Manifold.P12:
            h_nh[lv.index, lv.index] = lv.zeeman_shift - ir.detuning
    for _, L in ops:
        h_nh -= 0.5j * (L.conj().T @ L)
    P = [lv.index for lv in levels if lv.manifold is Manifold.P12]
    inv = np.zeros_like(h_nh)
    inv[np.ix_(P, P)] = np.linalg.inv(h_nh[np.ix_(P, P)])
    h_g = np.diag([lv.zeeman_shift if lv.manifold is Manifold.D32 else 0.0 for lv in levels]).astype(complex)
    h_eff = -0.5 * vp.conj().T @ (inv + inv.conj().T) @ vp + h_g
    l_eff = [L @ inv @ vp for _, L in ops]
    det = next(i for i, (key, _) in enumerate(ops) if key == DETECTED_CHANNEL)
    return h_eff, l_eff, det


def adiabatic_wavepacket(atom: AtomModel, ir: LaserField, rho0: np.ndarray, tau: np.ndarray,
                         scale: float = 1.0) -> np.ndarray:
    """Detected emission rate from the effective ground-state master equation,
    propagated with matrix exponentials on the uniform grid ``tau``."""
    from scipy.linalg import expm

    h, ls, det = effective_operators(atom, ir, scale)
    eye = np.eye(N_LEVELS)
    # row-major vectorization: vec(A X B) = kron(A, B.T) vec(X)
    L = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for c in ls:
        cdc = c.conj().T @ c
        L += np.kron(c, c.conj()) - 0.5 * (np.kron(cdc, eye) + np.kron(eye, cdc.T))
    rho = np.array(rho0, dtype=complex)
    P = [i for i, lv in enumerate(LEVELS) if lv[0] is Manifold.P12]
    rho[P, :] = 0.0
    rho[:, P] = 0.0
    y = rho.reshape(-1)
    tau = np.asarray(tau, dtype=float)
    step = expm(L * (tau[1] - tau[0])) if len(tau) > 1 else None
    c = ls[det]
    out = np.empty(len(tau))
    for k in range(len(tau)):
        r = y.reshape(N_LEVELS, N_LEVELS)
        out[k] = float(np.trace(c @ r @ c.conj().T).real)
        if step is not None:
            y = step @ y
    return out


@dataclass
class ScanResult:
    rabi: np.ndarray  # rad/ns
    intensity_rel: np.ndarray  # (Omega / Omega_ref)^2
    gamma: np.ndarray
    stderr: np.ndarray
    gamma_oracle: np.ndarray
    windows: list[tuple[float, float]]
    slope: float
    r2: float  # uncentered, the usual definition for a fit through the origin
    r2_centered: float

    @property
    def t1(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.gamma > 0, 1.0 / self.gamma, np.inf)


def linearity_scan(base, rabi_values: Sequence[float], reference_rabi: float | None = None,
                   window: tuple[float, float] | None = None, dt: float = 1.0) -> ScanResult:
    """Fit the wavepacket tail for each IR Rabi frequency and regress Gamma on intensity.

    ``base`` is a :class:`~ramansource.dynamics.Source`; only the IR laser's
    ``rabi_peak`` is changed. Each point is also evaluated with the
    adiabatic-elimination wavepacket, started from the simulated state at the
    beginning of phase III and fitted over the same window.
    """
    from .dynamics import simulate_sequence, unvec, vec, with_ir_rabi

    rabi_values = np.asarray(rabi_values, dtype=float)
    if len(rabi_values) < 4:
        raise ValueError("need at least 4 intensities")
    ref = float(reference_rabi if reference_rabi is not None else rabi_values.max())
    a, b = base.sequence.emission_window
    gam, err, orc, wins = [], [], [], []
    for om in rabi_values:
        src = with_ir_rabi(base, float(om))
        if om == 0:
            gam.append(0.0), err.append(0.0), orc.append(0.0), wins.append((0.0, 0.0))
            continue
        res = simulate_sequence(src, dt=dt)
        tr = res.trace
        m = (tr.times >= a) & (tr.times <= b)
        tau = tr.times[m] - a
        rate = tr.emission_rate[m]
        win = window or auto_window(tau, rate)
        fit = fit_exponential_tail((tau, rate), win)
        ir = next(l for l in src.lasers if l.transition is Transition.IR_866)
        rho_a = unvec(src.propagate(vec(res.rho_start), 0.0, a)[0]) if a > 0 else res.rho_start
        scale = src.sequence.phases[2].ir_scale
        ofit = fit_exponential_tail((tau, adiabatic_wavepacket(src.atom, ir, rho_a, tau, scale)), win)
        gam.append(fit.gamma), err.append(fit.gamma_err), orc.append(ofit.gamma), wins.append(win)
    inten = (rabi_values / ref) ** 2
    gam = np.array(gam)
    slope = float(inten @ gam / (inten @ inten))
    ss_res = float(np.sum((gam - slope * inten) ** 2))
    ss_unc = float(np.sum(gam**2))
    ss_tot = float(np.sum((gam - gam.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_unc if ss_unc > 0 else 1.0
    r2c = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ScanResult(rabi_values, inten, gam, np.array(err), np.array(orc), wins, slope, r2, r2c)


# -- regression-mode coincidence models ------------------------------------

@dataclass
class CoincidenceModel:
    """Coincidence densities (per sequence, per ns of delay) for two detectors.

    ``signal`` holds pairs of photons from different emitters, ``same_source``
    pairs from one emitter. ``singles`` are the photon rates reaching each
    detector on the emission-time grid ``t`` (before detector efficiency).
    """

    tau: np.ndarray
    t: np.ndarray
    signal: np.ndarray
    same_source: np.ndarray
    singles: tuple[np.ndarray, np.ndarray]
    window: tuple[float, float]

    @property
    def dt(self) -> float:
        return float(self.tau[1] - self.tau[0])


def _symmetric(pos: np.ndarray) -> np.ndarray:
    return np.concatenate([pos[:0:-1], pos])


def _same_source_density(G) -> np.ndarray:
    """Density of photon pairs from one emitter at delay tau > 0 (intensity
    correlation integrated over the first emission time)."""
    d = G.intensity.sum(axis=0) * G.dt
    d[0] = 0.0
    return d


def hbt_coincidence_model(G, window: tuple[float, float]) -> CoincidenceModel:
    """One source on a 50/50 splitter: each pair lands on different detectors
    with probability 1/2, split evenly between the two delay signs."""
    tau = np.concatenate([-G.tau[:0:-1], G.tau])
    same = 0.25 * _symmetric(_same_source_density(G))
    half = 0.5 * G.n
    return CoincidenceModel(tau, G.t, np.zeros_like(tau), same, (half, half), window)


@dataclass
class G1Summary:
    tau: np.ndarray
    g1: np.ndarray
    t2: float
    t2_err: float
    amplitude: float
    fit_window: tuple[float, float]
    weights: np.ndarray
    residuals: np.ndarray
    beat_mhz: float
    fft_bin_mhz: float
    freq_mhz: np.ndarray
    spectrum: np.ndarray
    beat_depth: float = 0.0  # relative modulation amplitude of |g1| at the beat


@dataclass
class TwoPhotonResult:
    tau: np.ndarray
    p_ni: np.ndarray  # coincidence density per sequence per ns, overlap 0
    p_int: np.ndarray  # same with the requested overlap
    overlap: float
    t1: float
    t1_fit: ExpFit
    central_window: tuple[float, float]
    contrast: float
    ni: CoincidenceModel
    int: CoincidenceModel
    g1: G1Summary | None = None
    mode: str = "regression"

    @property
    def reference(self) -> float:
        """Uncorrelated-pair expectation at zero delay (the overlap-0 value)."""
        return float(self.p_ni[len(self.tau) // 2])

    @property
    def g2_ni(self) -> np.ndarray:
        return self.p_ni / self.reference

    @property
    def g2_int(self) -> np.ndarray:
        return self.p_int / self.reference

    @property
    def t2(self) -> float | None:
        return None if self.g1 is None else self.g1.t2


def _check_compatible(Ga, Gb) -> None:
    if Ga.G.shape != Gb.G.shape or not np.allclose(Ga.t, Gb.t) or not np.allclose(Ga.tau, Gb.tau):
        raise ValueError("correlations are on different grids")
    if len(Ga.tau) < 2:
        raise ValueError("need at least two delay points")


def two_source_density(Ga, Gb, overlap: float) -> np.ndarray:
    """Coincidence density for tau >= 0:
    1/4 sum_t [n_a(t) n_b(t+tau) + n_b(t) n_a(t+tau) - 2 overlap Re(G_a* G_b)] dt."""
    _check_compatible(Ga, Gb)
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    na, nb = Ga.n, Gb.n
    out = np.empty(len(Ga.tau))
    for j in range(len(Ga.tau)):
        s = na @ Gb.n_shifted(j) + nb @ Ga.n_shifted(j)
        if overlap:
            s -= 2.0 * overlap * float(np.sum((np.conj(Ga.G[:, j]) * Gb.G[:, j]).real))
        out[j] = 0.25 * s * Ga.dt
    return out


def central_sum(tau: np.ndarray, density: np.ndarray, window: tuple[float, float]) -> float:
    m = (tau >= window[0] - 1e-9) & (tau <= window[1] + 1e-9)
    return float(density[m].sum() * (tau[1] - tau[0]))


def hom_coincidence_model(Ga, Gb, overlap: float, t1_window: tuple[float, float] | None = None,
                          with_g1: bool = True) -> TwoPhotonResult:
    """Two-source interference at a 50/50 splitter in regression mode.

    T1 is fitted to the tail of the overlap-0 central peak; the contrast uses
    coincidences integrated over |tau| <= T1/2.
    """
    _check_compatible(Ga, Gb)
    pos_ni = two_source_density(Ga, Gb, 0.0)
    pos_int = two_source_density(Ga, Gb, overlap)
    tau = np.concatenate([-Ga.tau[:0:-1], Ga.tau])
    win = t1_window or auto_window(Ga.tau, pos_ni)
    fit = fit_exponential_tail((Ga.tau, pos_ni), win)
    cw = (-fit.t1 / 2, fit.t1 / 2)
    p_ni, p_int = _symmetric(pos_ni), _symmetric(pos_int)
    c_ni = central_sum(tau, p_ni, cw)
    contrast = 1.0 - central_sum(tau, p_int, cw) / c_ni if c_ni > 0 else 0.0
    same = 0.25 * _symmetric(_same_source_density(Ga) + _same_source_density(Gb))
    singles = 0.5 * (Ga.n + Gb.n)
    ni = CoincidenceModel(tau, Ga.t, p_ni, same, (singles, singles), cw)
    it = CoincidenceModel(tau, Ga.t, p_int, same, (singles, singles), cw)
    g1 = g1_summary(Ga) if with_g1 else None
    return TwoPhotonResult(tau, p_ni, p_int, float(overlap), fit.t1, fit, cw, float(contrast), ni, it, g1)


class PairInterference:
    """Probability that one photon from each source leaves a 50/50 splitter by
    different ports, given their emission times.

    With S = n_a(t) n_b(t') + n_b(t) n_a(t') and X = Re(G_a* G_b)(t, t'),
    t <= t', the probability is 1/2 - overlap X / S. Times are looked up on
    the nearest grid point of the regression correlations.
    """

    def __init__(self, Ga, Gb, overlap: float):
        _check_compatible(Ga, Gb)
        self.Ga, self.Gb, self.overlap = Ga, Gb, float(overlap)
        self._cross = (np.conj(Ga.G) * Gb.G).real

    def __call__(self, ta: np.ndarray, tb: np.ndarray) -> np.ndarray:
        ta, tb = np.asarray(ta, dtype=float), np.asarray(tb, dtype=float)
        t0, dt, nt = self.Ga.t[0], self.Ga.dt, len(self.Ga.t)
        early, late = np.minimum(ta, tb), np.maximum(ta, tb)
        i = np.clip(np.rint((early - t0) / dt).astype(np.int64), 0, nt - 1)
        k = np.clip(np.rint((late - t0) / dt).astype(np.int64), 0, nt - 1)
        j = np.minimum(k - i, len(self.Ga.tau) - 1)
        na, nb = self.Ga.n, self.Gb.n
        S = na[i] * nb[i + j] + nb[i] * na[i + j]
        X = self._cross[i, j]
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(S > 0, 0.5 - self.overlap * X / S, 0.5)
        return np.clip(p, 0.0, 1.0)


# -- accidentals -----------------------------------------------------------

@dataclass
class AccidentalsBudget:
    """Expected coincidences per sequence in the central window, by origin."""

    components: dict[str, float]
    window: tuple[float, float]

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))

    @property
    def fractions(self) -> dict[str, float]:
        tot = self.total
        return {k: (v / tot if tot > 0 else 0.0) for k, v in self.components.items()}

    @property
    def background_fraction(self) -> float:
        f = self.fractions
        return f["signal_dark"] + f["dark_dark"] + f["same_source"]

    @property
    def dark_fraction(self) -> float:
        f = self.fractions
        return f["signal_dark"] + f["dark_dark"]

    @property
    def background(self) -> float:
        c = self.components
        return c["signal_dark"] + c["dark_dark"] + c["same_source"]


def _gate_mask(det: DetectorModel, t: np.ndarray, period: float) -> np.ndarray:
    # t + tau may fall into a neighbouring sequence
    return det.in_gate(np.mod(t, period), period).astype(float)


def accidentals_budget(model: CoincidenceModel | TwoPhotonResult, detectors: tuple[DetectorModel, DetectorModel],
                       repetition_period: float, window: tuple[float, float] | None = None
                       ) -> AccidentalsBudget | dict[str, AccidentalsBudget]:
    """Split the modelled coincidences in ``window`` into two-source signal,
    signal x dark, dark x dark and same-source doubles.

    For a :class:`TwoPhotonResult` a budget is returned for each of the
    ``ni`` and ``int`` configurations.
    """
    if isinstance(model, TwoPhotonResult):
        return {"ni": accidentals_budget(model.ni, detectors, repetition_period, window),
                "int": accidentals_budget(model.int, detectors, repetition_period, window)}
    d1, d2 = detectors
    win = window or model.window
    eta = d1.efficiency * d2.efficiency
    dtau = model.dt
    sel = np.nonzero((model.tau >= win[0] - 1e-9) & (model.tau <= win[1] + 1e-9))[0]
    t = model.t
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    s1 = d1.efficiency * model.singles[0] * _gate_mask(d1, t, repetition_period)
    s2 = d2.efficiency * model.singles[1] * _gate_mask(d2, t, repetition_period)
    sig_dark = 0.0
    dark_dark = 0.0
    for j in sel:
        tau = model.tau[j]
        # click on detector 1 at t, detector 2 at t + tau
        sig_dark += d2.dark_rate * float(s1 @ _gate_mask(d2, t + tau, repetition_period)) * dt
        sig_dark += d1.dark_rate * float(s2 @ _gate_mask(d1, t - tau, repetition_period)) * dt
        dark_dark += d1.dark_rate * d2.dark_rate * _gate_overlap(d1, d2, tau, repetition_period)
    comps = {
        "two_source": eta * float(model.signal[sel].sum()) * dtau,
        "signal_dark": sig_dark * dtau,
        "dark_dark": dark_dark * dtau,
        "same_source": eta * float(model.same_source[sel].sum()) * dtau,
    }
    return AccidentalsBudget(comps, (float(win[0]), float(win[1])))


def _gate_overlap(d1: DetectorModel, d2: DetectorModel, tau: float, period: float) -> float:
    """Length of {t in one period : t in gate1 and t + tau in gate2 of any sequence}."""
    total = 0.0
    ks = range(int(np.floor(tau / period)) - 1, int(np.ceil(tau / period)) + 2)
    for a1, b1 in d1.windows(period):
        for a2, b2 in d2.windows(period):
            for k in ks:
                total += max(0.0, min(b1, b2 + k * period - tau) - max(a1, a2 + k * period - tau))
    return total


def calibrate_dark_rate(model: CoincidenceModel, detector: DetectorModel, repetition_period: float,
                        target_fraction: float, window: tuple[float, float] | None = None) -> float:
    """Dark rate (same on both detectors) that makes dark-related coincidences
    the requested fraction of all coincidences in the window."""
    def excess(rate: float) -> float:
        d = replace(detector, dark_rate=rate)
        return accidentals_budget(model, (d, d), repetition_period, window).dark_fraction - target_fraction

    hi = 1e-6
    while excess(hi) < 0:
        hi *= 4
        if hi > 1e3:
            raise ValueError("target dark fraction not reachable")
    return float(brentq(excess, 0.0, hi, xtol=1e-15, rtol=1e-12))


# -- first-order coherence -------------------------------------------------

def _robust_envelope(tau: np.ndarray, y: np.ndarray, n_iter: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Straight-line fit to log|g1| that discounts points far below the line.

    Beat nodes only pull |g1| down, so negative residuals are weighted by
    (s / r)^2 beyond a scale s set by the spread of the positive residuals.
    """
    X = np.column_stack([np.ones_like(tau), tau])
    w = np.ones_like(tau)
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    for _ in range(n_iter):
        r = y - X @ beta
        pos = r[r > 0]
        s = max(float(np.sqrt(np.mean(pos**2))) if len(pos) else 0.0, 1e-3)
        w_new = np.where(r >= -s, 1.0, (s / np.maximum(np.abs(r), s)) ** 2)
        sw = np.sqrt(w_new)
        beta_new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        done = np.allclose(beta_new, beta, rtol=1e-10, atol=1e-13)
        beta, w = beta_new, w_new
        if done:
            break
    return beta, w, y - X @ beta


def g1_summary(G, fit_window: tuple[float, float] | None = None, floor: float = 1e-2,
               pad: int = 16, min_depth: float = 0.02) -> G1Summary:
    """Normalized field correlation g1(tau) = sum_t G(t, t+tau) / sum_t n(t),
    its exponential envelope time T2 and the beat frequency.

    The beat is the dominant nonzero-frequency peak in the spectrum of |g1|
    divided by its envelope (mirrored to negative delays), i.e. the frequency
    difference of the two emission lines. ``fft_bin_mhz`` is the bin width of
    the unpadded transform. A modulation shallower than ``min_depth`` is
    reported as no beat (``beat_mhz`` is NaN).
    """
    norm = float(G.n.sum())
    if norm <= 0:
        raise FitError("no emission on the grid")
    g1 = G.G.sum(axis=0) / norm
    g1[0] = 1.0
    tau = G.tau
    amp = np.abs(g1)
    if fit_window is None:
        below = np.nonzero(amp < floor)[0]
        end = tau[below[0] - 1] if len(below) else tau[-1]
        fit_window = (float(tau[1]), float(end))
    m = (tau >= fit_window[0] - 1e-9) & (tau <= fit_window[1] + 1e-9) & (amp > 0)
    if m.sum() < 5:
        raise FitError("fewer than 5 points in the g1 fit window")
    beta, w, res = _robust_envelope(tau[m], np.log(amp[m]))
    if not beta[1] < 0:
        raise FitError("g1 envelope does not decay", res)
    X = np.column_stack([np.ones(m.sum()), tau[m]])
    XtW = X.T * w
    dof = max(m.sum() - 2, 1)
    cov = np.linalg.inv(XtW @ X) * float(np.sum(w * res**2) / dof)
    t2 = -1.0 / beta[1]
    t2_err = float(np.sqrt(max(cov[1, 1], 0.0))) * t2**2

    # beat: spectrum of |g1| divided by the fitted envelope, over the fit
    # window mirrored to negative delays
    dtau = float(tau[1] - tau[0])
    ratio = amp[m] * np.exp(-(beta[0] + beta[1] * tau[m]))
    sym = np.concatenate([ratio[:0:-1], ratio])
    n = len(sym)
    spectrum = np.abs(np.fft.rfft((sym - sym.mean()) * np.hanning(n), pad * n))
    freq = np.fft.rfftfreq(pad * n, dtau) * 1e3  # MHz
    bin_mhz = 1e3 / (n * dtau)
    k = int(np.searchsorted(freq, bin_mhz))
    if k < len(spectrum):
        kk = k + int(np.argmax(spectrum[k:]))
        beat = float(freq[kk])
        depth = float(2.0 * spectrum[kk] / (np.hanning(n).sum() * max(sym.mean(), 1e-300)))
    else:
        beat, depth = float("nan"), 0.0
    if depth < min_depth:
        beat = float("nan")
    return G1Summary(tau, g1, float(t2), t2_err, float(np.exp(beta[0])), (float(fit_window[0]), float(fit_window[1])),
                     w, res, beat, bin_mhz, freq, spectrum, depth)


# -- CSV writers -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_columns(path: str | Path, header: Sequence[str], columns: Sequence[np.ndarray], digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# digest: {digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])


def write_histogram_csv(h: CorrelationHistogram, path: str | Path, digest: str = "") -> None:
    write_columns(path, ("tau_ns", "counts", "norm", "err"), (h.tau, h.counts, h.norm, h.errors), digest)


def write_wavepacket_csv(wp: WavepacketEstimate, path: str | Path, digest: str = "") -> None:
    write_columns(path, ("tau_ns", "rate"), (wp.tau, wp.rate), digest)


def write_g1_csv(s: G1Summary, path: str | Path, digest: str = "") -> None:
    write_columns(path, ("tau_ns", "re", "im", "abs"), (s.tau, s.g1.real, s.g1.imag, np.abs(s.g1)), digest)


def write_scan_csv(s: ScanResult, path: str | Path, digest: str = "") -> None:
    write_columns(path, ("intensity_rel", "gamma_per_ns", "stderr"), (s.intensity_rel, s.gamma, s.stderr), digest)


def write_model_csv(tau: np.ndarray, density: np.ndarray, reference: float, path: str | Path,
                    digest: str = "") -> None:
    """Regression-mode coincidence density in the histogram layout (err = 0)."""
    write_columns(path, ("tau_ns", "counts", "norm", "err"),
           (tau, density, density / reference, np.zeros_like(tau)), digest)
