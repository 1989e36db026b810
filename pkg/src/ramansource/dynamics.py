"""Master-equation dynamics of the driven ion through the excitation sequence.

The density matrix is vectorized row-major, so ``vec(A @ rho @ B)`` equals
``kron(A, B.T) @ vec(rho)``.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .atom import (
    D_IDX,
    DETECTED_CHANNEL,
    N_LEVELS,
    P_IDX,
    S_IDX,
    AtomModel,
    LaserField,
    Transition,
    build_jump_operators,
    detected_operator,
    hamiltonian_parts,
)
from .integrate import LinearPiecewiseIntegrator, integrate_linear

log = logging.getLogger(__name__)

DIM = N_LEVELS * N_LEVELS


class DegenerateSteadyState(ValueError):
    """The Liouvillian has more than one stationary state.

    ``basis`` holds trace-normalized stationary density matrices spanning the
    null space (Hermitian parts of an orthonormal null basis).
    """

    def __init__(self, message: str, basis: list[np.ndarray]):
        super().__init__(message)
        self.basis = basis


class FixedPointError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Phase:
    duration: float
    blue_scale: float
    ir_scale: float

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("phase duration must be non-negative")
        for name in ("blue_scale", "ir_scale"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class Leakage:
    fraction: float = 0.0  # residual blue intensity, relative to the cooling phase
    duration: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("leakage fraction outside [0, 1]")
        if self.duration < 0:
            raise ValueError("leakage duration must be non-negative")


@dataclass(frozen=True)
class PulseSequence:
    """Phases I (cool), II (prepare in D), III (emit), then lasers off until the
    end of the period.

    Amplitude scales switch with linear ramps of length ``switching_edge``:
    a laser being turned down finishes its ramp at the boundary and one being
    turned up starts its ramp there, so switching is break-before-make. During the first ``leakage.duration`` of phase
    III the blue amplitude is ``sqrt(leakage.fraction)`` times its cooling
    (phase I) value.
    """

    phases: tuple[Phase, Phase, Phase]
    repetition_period: float
    leakage: Leakage = Leakage()
    switching_edge: float = 10.0

    def __post_init__(self):
        phases = tuple(p if isinstance(p, Phase) else Phase(**p) for p in self.phases)
        object.__setattr__(self, "phases", phases)
        if len(phases) != 3:
            raise ValueError("sequence needs exactly three phases (I cool, II prepare, III emit)")
        if sum(p.duration for p in phases) > self.repetition_period + 1e-9:
            raise ValueError("sum of phase durations exceeds repetition_period")
        if self.leakage.duration > phases[2].duration:
            raise ValueError("leakage.duration exceeds phase III duration")
        if self.switching_edge < 0:
            raise ValueError("switching_edge must be non-negative")
        for seg in self._segments():
            if seg[1] > seg[0] and seg[1] - seg[0] < 2 * self.switching_edge - 1e-12:
                raise ValueError("every sequence segment must last at least two switching edges")

    @property
    def phase_starts(self) -> tuple[float, float, float, float]:
        t1 = self.phases[0].duration
        t2 = t1 + self.phases[1].duration
        t3 = t2 + self.phases[2].duration
        return 0.0, t1, t2, t3

    @property
    def emission_window(self) -> tuple[float, float]:
        _, _, t2, t3 = self.phase_starts
        return t2, t3

    def _segments(self) -> list[tuple[float, float, float, float]]:
        """(start, end, blue, ir) amplitude plateaus covering one period."""
        p1, p2, p3 = self.phases
        _, t1, t2, t3 = self.phase_starts
        leak_blue = np.sqrt(self.leakage.fraction) * p1.blue_scale
        segs = [(0.0, t1, p1.blue_scale, p1.ir_scale), (t1, t2, p2.blue_scale, p2.ir_scale)]
        if self.leakage.fraction > 0 and self.leakage.duration > 0:
            tl = t2 + self.leakage.duration
            segs.append((t2, tl, max(leak_blue, p3.blue_scale), p3.ir_scale))
            segs.append((tl, t3, p3.blue_scale, p3.ir_scale))
        else:
            segs.append((t2, t3, p3.blue_scale, p3.ir_scale))
        segs.append((t3, self.repetition_period, 0.0, 0.0))
        return [s for s in segs if s[1] > s[0]]

    @cached_property
    def pieces(self) -> list[tuple[float, float, float, float, float, float]]:
        """Linear pieces (a, b, blue_a, blue_b, ir_a, ir_b) covering [0, period)."""
        segs = self._segments()
        period = self.repetition_period
        edge = self.switching_edge
        if edge == 0:
            return [(a, b, blue, blue, ir, ir) for a, b, blue, ir in segs]
        knots = []
        for which in (2, 3):
            pts: list[tuple[float, float]] = []
            for k, seg in enumerate(segs):
                a, new, old = seg[0], seg[which], segs[k - 1][which]  # cyclic predecessor
                if new > old:
                    pts += [(a, old), (a + edge, new)]
                elif new < old:
                    pts += [(a - edge, old), (a, new)]
            if not pts:
                pts = [(0.0, segs[0][which])]
            pts.sort()
            ext = [(t + s * period, v) for s in (-1, 0, 1) for t, v in pts]
            knots.append((np.array([t for t, _ in ext]), np.array([v for _, v in ext])))
        bps = {0.0, period}
        for kt, _ in knots:
            bps.update(float(t) for t in kt if 0.0 < t < period)
        bps = sorted(bps)
        out = []
        for a, b in zip(bps[:-1], bps[1:]):
            (tb, vb), (tr, vr) = knots
            out.append((a, b, float(np.interp(a, tb, vb)), float(np.interp(b, tb, vb)),
                        float(np.interp(a, tr, vr)), float(np.interp(b, tr, vr))))
        return out

    def scales_at(self, t: float) -> tuple[float, float]:
        t = t % self.repetition_period
        for a, b, ba, bb, ra, rb in self.pieces:
            if a <= t < b:
                w = (t - a) / (b - a)
                return ba + w * (bb - ba), ra + w * (rb - ra)
        return self.pieces[-1][3], self.pieces[-1][5]

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        """Piece boundaries of the periodic drive within [t0, t1], including both ends."""
        period = self.repetition_period
        local = [p[0] for p in self.pieces]
        out = {t0, t1}
        k0 = int(np.floor(t0 / period))
        k1 = int(np.floor(t1 / period))
        for k in range(k0, k1 + 1):
            for x in local:
                t = k * period + x
                if t0 < t < t1:
                    out.add(t)
        return sorted(out)


def _superop_commutator(h: np.ndarray) -> np.ndarray:
    eye = np.eye(h.shape[0])
    return -1j * (np.kron(h, eye) - np.kron(eye, h.T))


def dissipator(jumps: Sequence[np.ndarray]) -> np.ndarray:
    eye = np.eye(N_LEVELS)
    out = np.zeros((DIM, DIM), dtype=complex)
    for L in jumps:
        k = L.conj().T @ L
        out += np.kron(L, L.conj()) - 0.5 * (np.kron(k, eye) + np.kron(eye, k.T))
    return out


def vec(rho: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rho).reshape(-1)


def unvec(v: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape(N_LEVELS, N_LEVELS)


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (d + d.conj().T)))))


def check_density_matrix(rho: np.ndarray, trace_tol: float = 1e-9, herm_tol: float = 1e-10,
                         eig_tol: float = 1e-8) -> None:
    if abs(np.trace(rho) - 1.0) > trace_tol:
        raise ValueError(f"trace {np.trace(rho).real:.12f} deviates from 1")
    if np.max(np.abs(rho - rho.conj().T)) > herm_tol:
        raise ValueError("density matrix is not Hermitian")
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -eig_tol:
        raise ValueError("density matrix has a negative eigenvalue")


def pure_state(index: int) -> np.ndarray:
    rho = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
    rho[index, index] = 1.0
    return rho


@dataclass(frozen=True)
class Source:
    """One ion with its lasers and excitation sequence."""

    atom: AtomModel
    lasers: tuple[LaserField, ...]
    sequence: PulseSequence

    def __post_init__(self):
        object.__setattr__(self, "lasers", tuple(self.lasers))
        hamiltonian_parts(self.atom, self.lasers)  # rejects duplicate transitions

    @cached_property
    def _parts(self):
        h0, couplings = hamiltonian_parts(self.atom, self.lasers)
        zero = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
        return h0, couplings.get(Transition.BLUE_397, zero), couplings.get(Transition.IR_866, zero)

    def hamiltonian(self, blue: float, ir: float) -> np.ndarray:
        h0, vb, vr = self._parts
        return h0 + blue * vb + ir * vr

    @cached_property
    def jump_operators(self):
        return build_jump_operators(self.atom)

    @cached_property
    def superoperators(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        h0, vb, vr = self._parts
        fixed = _superop_commutator(h0) + dissipator([j.matrix for j in self.jump_operators])
        return fixed, _superop_commutator(vb), _superop_commutator(vr)

    def liouvillian(self, blue: float, ir: float) -> np.ndarray:
        fixed, lb, lr = self.superoperators
        return fixed + blue * lb + ir * lr

    @cached_property
    def detected_operator(self) -> np.ndarray:
        return detected_operator(self.atom)

    @cached_property
    def _local_generators(self) -> list[tuple[float, float, np.ndarray, np.ndarray]]:
        fixed, lb, lr = self.superoperators
        out = []
        for a, b, b0, b1, r0, r1 in self.sequence.pieces:
            A = fixed + b0 * lb + r0 * lr
            B = ((b1 - b0) * lb + (r1 - r0) * lr) / (b - a)
            out.append((a, b, np.ascontiguousarray(A), np.ascontiguousarray(B)))
        return out

    def generator_pieces(self, t0: float, t1: float) -> list[tuple[float, float, np.ndarray, np.ndarray, float]]:
        """(a, b, A, B, t_ref) pieces of the periodic generator covering [t0, t1]."""
        period = self.sequence.repetition_period
        out = []
        k = int(np.floor(t0 / period))
        while k * period < t1:
            for a, b, A, B in self._local_generators:
                lo, hi = max(t0, k * period + a), min(t1, k * period + b)
                if hi > lo:
                    out.append((lo, hi, A, B, k * period + a))
            k += 1
        return out

    def propagate(self, y0: np.ndarray, t0: float, t1: float, sample_times=()):
        return LinearPiecewiseIntegrator().run(self.generator_pieces(t0, t1), y0, sample_times)


def with_ir_rabi(source: Source, rabi: float) -> Source:
    """Copy of ``source`` with the infrared laser's peak Rabi frequency replaced."""
    lasers = tuple(replace(l, rabi_peak=rabi) if l.transition is Transition.IR_866 else l for l in source.lasers)
    return Source(source.atom, lasers, source.sequence)


@dataclass
class PopulationTrace:
    times: np.ndarray
    populations: np.ndarray  # (n_samples, 8)
    emission_rate: np.ndarray  # detected photons / ns

    @property
    def S(self) -> np.ndarray:
        return self.populations[:, list(S_IDX)].sum(axis=1)

    @property
    def P(self) -> np.ndarray:
        return self.populations[:, list(P_IDX)].sum(axis=1)

    @property
    def D(self) -> np.ndarray:
        return self.populations[:, list(D_IDX)].sum(axis=1)

    def at(self, t: float) -> np.ndarray:
        """Level populations at the sample nearest to t."""
        return self.populations[int(np.argmin(np.abs(self.times - t)))]


def _trace_from_states(source: Source, times: np.ndarray, states: list[np.ndarray]) -> PopulationTrace:
    rhos = np.array(states).reshape(len(states), N_LEVELS, N_LEVELS)
    pops = np.real(np.einsum("kii->ki", rhos))
    u, _ = DETECTED_CHANNEL
    gamma_det = source.atom.gamma_detected
    return PopulationTrace(np.asarray(times, dtype=float), pops, gamma_det * pops[:, u])


def _sample_times(t0: float, t1: float, dt: float) -> np.ndarray:
    n = int(np.floor((t1 - t0) / dt + 1e-9))
    return t0 + dt * np.arange(n + 1)


def evolve_master(rho0: np.ndarray, atom: AtomModel, lasers: Sequence[LaserField],
                  sequence: PulseSequence, t0: float, t1: float, dt: float,
                  source: Source | None = None) -> tuple[PopulationTrace, np.ndarray]:
    """Integrate the Lindblad equation from t0 to t1, sampling every dt.

    Times are absolute; the drive repeats with the sequence period.
    """
    if not t1 > t0:
        raise ValueError("need t0 < t1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    check_density_matrix(rho0)
    if source is None:
        source = Source(atom, tuple(lasers), sequence)
    times = _sample_times(t0, t1, dt)
    y, samples = source.propagate(vec(rho0), t0, t1, times)
    rho1 = unvec(y)
    drift = abs(np.trace(rho1) - np.trace(rho0))
    if drift > 1e-9:
        log.warning("trace drift %.2e over [%g, %g] ns", drift, t0, t1)
    return _trace_from_states(source, times, samples), rho1


def evolve_constant(source: Source, rho0: np.ndarray, duration: float, blue: float, ir: float) -> np.ndarray:
    """Integrate with fixed laser scales (no sequence)."""
    m = source.liouvillian(blue, ir)
    y, _ = integrate_linear(m, vec(rho0), 0.0, duration)
    return unvec(y)


def steady_state(atom: AtomModel | Source, lasers: Sequence[LaserField] = (),
                 scales: Sequence[float] | None = None, rel_tol: float = 1e-9) -> np.ndarray:
    """Unique stationary state of the Liouvillian at constant laser scales.

    ``scales`` are (blue, ir) amplitude scales, defaulting to 1 for each laser
    present. Raises :class:`DegenerateSteadyState` when the null space has
    dimension larger than one.
    """
    if isinstance(atom, Source):
        source = atom
    else:
        seq = PulseSequence((Phase(1.0, 0, 0), Phase(0.0, 0, 0), Phase(0.0, 0, 0)), 1.0, switching_edge=0.0)
        source = Source(atom, tuple(lasers), seq)
    if scales is None:
        present = {l.transition for l in source.lasers}
        scales = (float(Transition.BLUE_397 in present), float(Transition.IR_866 in present))
    L = source.liouvillian(*scales)
    _, s, vh = np.linalg.svd(L)
    null = vh[s <= rel_tol * s[0]].conj()
    if len(null) == 0:
        null = vh[-1:].conj()
    if len(null) > 1:
        basis = []
        for v in null:
            r = unvec(v)
            r = 0.5 * (r + r.conj().T)
            tr = np.trace(r).real
            if abs(tr) > 1e-8:
                basis.append(r / tr)
        raise DegenerateSteadyState(f"stationary subspace has dimension {len(null)}", basis)
    rho = unvec(null[0])
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + rho.conj().T)
    return rho


@dataclass
class SequenceResult:
    trace: PopulationTrace
    rho_start: np.ndarray
    rho_end: np.ndarray
    iterations: int

    emission_window: tuple[float, float] = (0.0, np.inf)

    @property
    def detected_probability(self) -> float:
        """Detected-channel photons emitted per sequence during phase III."""
        a, b = self.emission_window
        m = (self.trace.times >= a) & (self.trace.times <= b)
        return float(np.trapezoid(self.trace.emission_rate[m], self.trace.times[m]))


def initial_guess(source: Source) -> np.ndarray:
    p1 = source.sequence.phases[0]
    try:
        return steady_state(source, scales=(p1.blue_scale, p1.ir_scale))
    except DegenerateSteadyState:
        rho = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
        for i in S_IDX:
            rho[i, i] = 0.5
        return rho


def _anderson_step(xs: list[np.ndarray], fs: list[np.ndarray]) -> np.ndarray:
    """Anderson mixing over the stored iterates; exact for affine maps once the
    history spans the slow modes."""
    res = np.array([f - x for x, f in zip(xs, fs)]).T
    m = res.shape[1]
    if m == 1:
        return fs[-1]
    # minimize |sum_k c_k r_k| subject to sum_k c_k = 1
    dr = res[:, 1:] - res[:, :1]
    coef, *_ = np.linalg.lstsq(dr, -res[:, 0], rcond=None)
    c = np.concatenate([[1.0 - coef.sum()], coef])
    return sum(ck * f for ck, f in zip(c, fs))


def simulate_sequence(source: Source, dt: float = 1.0, tol: float = 1e-8, max_iter: int = 100,
                      rho_start: np.ndarray | None = None, depth: int = 6) -> SequenceResult:
    """Run one repetition period from the cyclic fixed point of the sequence.

    Successive period maps are Anderson-accelerated; convergence is declared
    only when the start state itself maps to within ``tol`` (trace distance)
    of itself after one plain period.
    """
    period = source.sequence.repetition_period
    rho = initial_guess(source) if rho_start is None else rho_start
    times = _sample_times(0.0, period, dt)
    xs: list[np.ndarray] = []
    fs: list[np.ndarray] = []
    for it in range(1, max_iter + 1):
        y, samples = source.propagate(vec(rho), 0.0, period, times)
        rho_end = unvec(y)
        dist = trace_distance(rho_end, rho)
        log.debug("fixed-point iteration %d: distance %.3e", it, dist)
        if dist < tol:
            return SequenceResult(_trace_from_states(source, times, samples), rho, rho_end, it,
                                  source.sequence.emission_window)
        xs.append(vec(rho))
        fs.append(y)
        xs, fs = xs[-depth:], fs[-depth:]
        nxt = unvec(_anderson_step(xs, fs))
        nxt = 0.5 * (nxt + nxt.conj().T)
        rho = nxt / np.trace(nxt).real
    raise FixedPointError(f"cyclic fixed point not reached after {max_iter} periods")


@dataclass
class TwoTimeCorrelation:
    """G[i, j] = <E^dag(t_i) E(t_i + tau_j)> for the detected-channel field E.

    Entries with t_i + tau_j beyond the last grid time are zero. ``intensity``
    holds the same-source intensity correlation <E^dag(t) E^dag(t+tau) E(t+tau) E(t)>.
    """

    t: np.ndarray
    tau: np.ndarray
    G: np.ndarray
    intensity: np.ndarray = field(repr=False)

    @property
    def n(self) -> np.ndarray:
        return self.G[:, 0].real

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def n_shifted(self, j: int) -> np.ndarray:
        """n(t_i + tau_j) for every i (zero past the grid end)."""
        out = np.zeros(len(self.t))
        if j < len(self.t):
            out[: len(self.t) - j] = self.n[j:]
        return out


def interval_propagators(source: Source, grid: np.ndarray) -> np.ndarray:
    """Superoperator propagators for each consecutive pair of grid times,
    computed with the same integrator and breakpoints as :func:`evolve_master`."""
    eye = np.eye(DIM, dtype=complex)
    out = np.empty((len(grid) - 1, DIM, DIM), dtype=complex)
    integrator = LinearPiecewiseIntegrator()
    for k, (a, b) in enumerate(zip(grid[:-1], grid[1:])):
        out[k] = integrator.run(source.generator_pieces(a, b), eye)[0]
    return out


def _check_uniform(grid: np.ndarray, name: str) -> float:
    if len(grid) < 2:
        return 0.0
    d = np.diff(grid)
    if np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, abs(d[0])):
        raise ValueError(f"{name} must be uniform")
    return float(d[0])


def two_time_correlation(source: Source, t_grid: np.ndarray, tau_grid: np.ndarray,
                         sequence_result: SequenceResult | None = None) -> TwoTimeCorrelation:
    """Quantum-regression field and intensity correlations of the detected channel.

    ``t_grid`` must be uniform and ``tau_grid`` must be 0, dt, 2 dt, ... on the
    same step.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    tau_grid = np.asarray(tau_grid, dtype=float)
    dt = _check_uniform(t_grid, "t_grid")
    dtau = _check_uniform(tau_grid, "tau_grid")
    if abs(tau_grid[0]) > 1e-12 or (len(tau_grid) > 1 and abs(dtau - dt) > 1e-9 * dt):
        raise ValueError("tau_grid must start at 0 and share the t_grid step")
    if len(tau_grid) > len(t_grid):
        raise ValueError("tau_grid longer than t_grid")
    if sequence_result is None:
        sequence_result = simulate_sequence(source)
    period = source.sequence.repetition_period
    if t_grid[0] < 0 or t_grid[-1] > period:
        raise ValueError("t_grid must lie within one period")

    rho0 = sequence_result.rho_start
    y = source.propagate(vec(rho0), 0.0, t_grid[0])[0] if t_grid[0] > 0 else vec(rho0)
    props = interval_propagators(source, t_grid)

    E = source.detected_operator
    Ed = E.conj().T
    n_t, n_tau = len(t_grid), len(tau_grid)
    rhos = np.empty((n_t, DIM), dtype=complex)
    rhos[0] = y
    for k in range(n_t - 1):
        rhos[k + 1] = props[k] @ rhos[k]

    # X_i(0) = rho(t_i) E^dag and Y_i(0) = E rho(t_i) E^dag, propagated to t_i + tau
    rho_m = rhos.reshape(n_t, N_LEVELS, N_LEVELS)
    X = (rho_m @ Ed).reshape(n_t, DIM).T.copy()
    Y = (E @ rho_m @ Ed).reshape(n_t, DIM).T.copy()
    obs_field = vec(E.T)  # Tr[E X] = sum_ij E_ji X_ij
    EdE = Ed @ E
    obs_int = vec(EdE.T)
    G = np.zeros((n_t, n_tau), dtype=complex)
    G2 = np.zeros((n_t, n_tau))
    idx = np.arange(n_t)
    for j in range(n_tau):
        valid = idx + j < n_t
        G[valid, j] = obs_field @ X[:, valid]
        G2[valid, j] = (obs_int @ Y[:, valid]).real
        if j == n_tau - 1:
            break
        # advance column i from t_{i+j} to t_{i+j+1}
        sel = np.nonzero(idx + j + 1 < n_t)[0]
        X[:, sel] = np.einsum("kab,bk->ak", props[sel + j], X[:, sel])
        Y[:, sel] = np.einsum("kab,bk->ak", props[sel + j], Y[:, sel])
    G[:, 0] = G[:, 0].real
    return TwoTimeCorrelation(t_grid, tau_grid, G, G2)
