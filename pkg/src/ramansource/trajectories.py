"""Quantum-jump unraveling of the master equation.

Within a constant-drive segment the conditional state evolves as
psi(t) = exp(-i H_eff t) psi(0) with H_eff = H - (i/2) sum L^dag L, which is
evaluated through the eigendecomposition of H_eff. A jump happens when the
squared norm reaches a uniform threshold; the channel is drawn with weight
<L^dag L>. Switching ramps are split into short constant sub-segments.

Random numbers come from a counter-based generator keyed on
(seed, sequence index, draw number), so every sequence is reproducible on its
own and the event set does not depend on thread count or execution order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .atom import N_LEVELS
from .dynamics import SequenceResult, Source, simulate_sequence
from .photostream import EmissionRecord

RAMP_STEP = 1.0  # ns, sub-segment length used on switching ramps
CHUNK = 2048  # sequences per work item

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _uniform(key, j):
    """Uniform double in [0, 1) for draw ``j`` of the stream ``key``."""
    z = _mix(key + np.uint64(j) * _GOLDEN)
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def sequence_key(seed, index):
    return _mix(np.uint64(seed) ^ _mix(np.uint64(index) + _GOLDEN))


@njit(cache=True)
def _uniforms(seed, index, n):
    key = sequence_key(seed, index)
    out = np.empty(n)
    for j in range(n):
        out[j] = _uniform(key, j)
    return out


def counter_uniforms(seed: int, index: int, n: int) -> np.ndarray:
    """First ``n`` uniforms of the stream for one sequence (for tests)."""
    return _uniforms(np.uint64(seed), np.uint64(index), n)


@njit(cache=True, inline="always")
def _evolve(V, c, lam, d, out, ph):
    # out = V (c * exp(-i lam d)); returns |out|^2
    n = out.shape[0]
    for k in range(n):
        ph[k] = c[k] * np.exp(-1j * lam[k] * d)
    nrm = 0.0
    for i in range(n):
        acc = 0j
        for k in range(n):
            acc += V[i, k] * ph[k]
        out[i] = acc
        nrm += acc.real * acc.real + acc.imag * acc.imag
    return nrm


@njit(cache=True, nogil=True)
def _run(seed, first, count, seg_t0, seg_len, lam, V, Vinv, upper, lower, rate, detected,
         init_p, init_vec, sample_t, pop_sum, pop_sq):
    n = V.shape[1]
    nseg = seg_t0.shape[0]
    nsamp = sample_t.shape[0]
    cap = 1024
    ev_seq = np.empty(cap, dtype=np.int64)
    ev_t = np.empty(cap, dtype=np.float64)
    ev_ch = np.empty(cap, dtype=np.int64)
    nev = 0
    psi = np.empty(n, dtype=np.complex128)
    tmp = np.empty(n, dtype=np.complex128)
    c = np.empty(n, dtype=np.complex128)
    ph = np.empty(n, dtype=np.complex128)
    nch = upper.shape[0]
    w = np.empty(nch)
    for q in range(first, first + count):
        key = sequence_key(seed, q)
        j = 0
        u = _uniform(key, j)
        j += 1
        k0 = 0
        acc = init_p[0]
        while u >= acc and k0 < init_p.shape[0] - 1:
            k0 += 1
            acc += init_p[k0]
        for i in range(n):
            psi[i] = init_vec[k0, i]
        r = 1.0 - _uniform(key, j)
        j += 1
        nrm0 = 1.0  # squared norm of psi
        si = 0  # next sample index
        for s in range(nseg):
            L = seg_len[s]
            d0 = 0.0
            while True:
                for a in range(n):
                    acc_c = 0j
                    for b in range(n):
                        acc_c += Vinv[s, a, b] * psi[b]
                    c[a] = acc_c
                rem = L - d0
                nrm_end = _evolve(V[s], c, lam[s], rem, tmp, ph)
                t_here = seg_t0[s] + d0
                if nrm_end > r:
                    t_stop = seg_t0[s] + L
                    dj = -1.0
                else:
                    # regula falsi (Illinois) for |psi(d)|^2 = r on [0, rem]
                    lo, hi = 0.0, rem
                    flo, fhi = nrm0 - r, nrm_end - r
                    side = 0
                    dj = hi
                    for _ in range(200):
                        if hi - lo <= 1e-10 * (1.0 + hi):
                            break
                        x = hi - fhi * (hi - lo) / (fhi - flo) if fhi != flo else 0.5 * (lo + hi)
                        if not (lo < x < hi):
                            x = 0.5 * (lo + hi)
                        fx = _evolve(V[s], c, lam[s], x, tmp, ph) - r
                        if fx > 0.0:
                            lo, flo = x, fx
                            if side == 1:
                                fhi *= 0.5
                            side = 1
                        else:
                            hi, fhi = x, fx
                            if side == -1:
                                flo *= 0.5
                            side = -1
                    dj = hi
                    t_stop = t_here + dj
                # samples strictly before the next jump or segment end
                while si < nsamp and sample_t[si] < t_stop and sample_t[si] >= t_here:
                    nn = _evolve(V[s], c, lam[s], sample_t[si] - t_here, tmp, ph)
                    for i in range(n):
                        p = (tmp[i].real * tmp[i].real + tmp[i].imag * tmp[i].imag) / nn
                        pop_sum[si, i] += p
                        pop_sq[si, i] += p * p
                    si += 1
                if dj < 0.0:
                    nrm0 = _evolve(V[s], c, lam[s], rem, psi, ph)
                    break
                _evolve(V[s], c, lam[s], dj, tmp, ph)
                tot = 0.0
                for k in range(nch):
                    a2 = tmp[upper[k]].real ** 2 + tmp[upper[k]].imag ** 2
                    w[k] = rate[k] * a2
                    tot += w[k]
                u = _uniform(key, j) * tot
                j += 1
                ch = 0
                acc = w[0]
                while u >= acc and ch < nch - 1:
                    ch += 1
                    acc += w[ch]
                if nev == cap:
                    cap *= 2
                    ev_seq = _grow_i(ev_seq, cap)
                    ev_t = _grow_f(ev_t, cap)
                    ev_ch = _grow_i(ev_ch, cap)
                ev_seq[nev] = q
                ev_t[nev] = t_here + dj
                ev_ch[nev] = ch
                nev += 1
                for i in range(n):
                    psi[i] = 0j
                psi[lower[ch]] = 1.0
                nrm0 = 1.0
                r = 1.0 - _uniform(key, j)
                j += 1
                d0 += dj
        # samples at or after the last segment end (t = period) use the final state
        while si < nsamp:
            for i in range(n):
                p = (psi[i].real ** 2 + psi[i].imag ** 2) / nrm0
                pop_sum[si, i] += p
                pop_sq[si, i] += p * p
            si += 1
    return ev_seq[:nev], ev_t[:nev], ev_ch[:nev]


@njit(cache=True)
def _grow_i(a, cap):
    out = np.empty(cap, dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _grow_f(a, cap):
    out = np.empty(cap, dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@dataclass
class _Segments:
    t0: np.ndarray
    length: np.ndarray
    lam: np.ndarray
    V: np.ndarray
    Vinv: np.ndarray


def _constant_segments(source: Source, ramp_step: float = RAMP_STEP) -> list[tuple[float, float, float, float]]:
    out = []
    for a, b, b0, b1, r0, r1 in source.sequence.pieces:
        if b0 == b1 and r0 == r1:
            out.append((a, b - a, b0, r0))
            continue
        m = max(1, int(np.ceil((b - a) / ramp_step - 1e-9)))
        h = (b - a) / m
        for k in range(m):
            f = (k + 0.5) / m
            out.append((a + k * h, h, b0 + f * (b1 - b0), r0 + f * (r1 - r0)))
    return out


def _diagonalize(h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lam, V = np.linalg.eig(h)
    return lam, V, np.linalg.inv(V)


def build_segments(source: Source, ramp_step: float = RAMP_STEP) -> _Segments:
    """Eigendecompositions of H_eff for every constant-drive segment of one period."""
    damp = sum(j.matrix.conj().T @ j.matrix for j in source.jump_operators)
    cache: dict[tuple[float, float], tuple] = {}
    t0, ln, lams, Vs, Vis = [], [], [], [], []
    for a, length, blue, ir in _constant_segments(source, ramp_step):
        key = (blue, ir)
        if key not in cache:
            h = source.hamiltonian(blue, ir) - 0.5j * damp
            lam, V, Vi = _diagonalize(h)
            if np.linalg.cond(V) > 1e7:
                # nudge away from an exceptional point of the non-Hermitian H_eff
                h = source.hamiltonian(blue * (1 + 1e-6), ir * (1 + 1e-6)) - 0.5j * damp
                lam, V, Vi = _diagonalize(h)
            cache[key] = (lam, V, Vi)
        lam, V, Vi = cache[key]
        t0.append(a), ln.append(length), lams.append(lam), Vs.append(V), Vis.append(Vi)
    return _Segments(np.array(t0), np.array(ln), np.array(lams), np.ascontiguousarray(Vs),
                     np.ascontiguousarray(Vis))


def _initial_ensemble(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pure-state decomposition of the period-start density matrix."""
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    w = np.clip(w, 0.0, None)
    keep = w > 1e-14
    w, v = w[keep], v[:, keep]
    return w / w.sum(), np.ascontiguousarray(v.T)


def worker_count() -> int:
    env = os.environ.get("RPS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"RPS_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass
class TrajectoryAverage:
    times: np.ndarray
    mean: np.ndarray  # (n_samples, 8) level populations
    stderr: np.ndarray
    n_sequences: int


def _prepare(source: Source, sequence_result: SequenceResult | None):
    res = sequence_result or simulate_sequence(source)
    seg = build_segments(source)
    jumps = source.jump_operators
    upper = np.array([j.upper for j in jumps], dtype=np.int64)
    lower = np.array([j.lower for j in jumps], dtype=np.int64)
    rate = np.array([j.rate for j in jumps])
    det = np.array([j.detected for j in jumps])
    p, vecs = _initial_ensemble(res.rho_start)
    return seg, upper, lower, rate, det, p, vecs


def quantum_jump_trajectories(source: Source, n_sequences: int, seed: int,
                              sequence_result: SequenceResult | None = None,
                              threads: int | None = None, first_sequence: int = 0) -> EmissionRecord:
    """Emission events of ``n_sequences`` independent repetitions of the sequence.

    Each repetition starts from a pure state drawn from the cyclic fixed point
    of the master equation.
    """
    if n_sequences < 1:
        raise ValueError("n_sequences must be at least 1")
    seg, upper, lower, rate, det, p, vecs = _prepare(source, sequence_result)
    seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    starts = list(range(first_sequence, first_sequence + n_sequences, CHUNK))
    empty = np.empty(0)
    none = np.zeros((0, N_LEVELS))

    def work(s0: int):
        cnt = min(CHUNK, first_sequence + n_sequences - s0)
        return _run(seed, s0, cnt, seg.t0, seg.length, seg.lam, seg.V, seg.Vinv, upper, lower, rate, det,
                    p, vecs, empty, none.copy(), none.copy())

    nthreads = min(threads or worker_count(), len(starts))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    seq = np.concatenate([pp[0] for pp in parts])
    t = np.concatenate([pp[1] for pp in parts])
    ch = np.concatenate([pp[2] for pp in parts])
    return EmissionRecord(seq, t, ch, det[ch], n_sequences, source.sequence.repetition_period)


def trajectory_populations(source: Source, n_sequences: int, seed: int, sample_times: np.ndarray,
                           sequence_result: SequenceResult | None = None,
                           threads: int | None = None) -> TrajectoryAverage:
    """Ensemble-averaged level populations of the normalized conditional states."""
    seg, upper, lower, rate, det, p, vecs = _prepare(source, sequence_result)
    times = np.asarray(sample_times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("sample_times must be sorted")
    seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    starts = list(range(0, n_sequences, CHUNK))

    def work(s0: int):
        cnt = min(CHUNK, n_sequences - s0)
        ps = np.zeros((len(times), N_LEVELS))
        pq = np.zeros((len(times), N_LEVELS))
        _run(seed, s0, cnt, seg.t0, seg.length, seg.lam, seg.V, seg.Vinv, upper, lower, rate, det,
             p, vecs, times, ps, pq)
        return ps, pq

    nthreads = min(threads or worker_count(), len(starts))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    s1 = sum(pp[0] for pp in parts)
    s2 = sum(pp[1] for pp in parts)
    mean = s1 / n_sequences
    var = np.clip(s2 / n_sequences - mean**2, 0.0, None)
    return TrajectoryAverage(times, mean, np.sqrt(var / max(n_sequences - 1, 1)), n_sequences)
