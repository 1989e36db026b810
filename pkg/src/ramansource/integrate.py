"""Adaptive embedded Runge-Kutta integration (Dormand-Prince 5(4)) of linear
systems y' = (A + (t - t_ref) B) y with complex y.

``y`` is two-dimensional, so the same kernel propagates one vectorized
density matrix (shape (64, 1)) or a full propagator (64, 64).
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from numba import njit

RTOL = 1e-9
ATOL = 1e-12
MIN_STEP = 1e-6  # ns


class IntegrationError(ArithmeticError):
    """Step size fell below MIN_STEP while trying to meet the tolerance."""


# Dormand & Prince (1980) tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1 = B1 - 5179 / 57600
E3 = B3 - 7571 / 16695
E4 = B4 - 393 / 640
E5 = B5 + 92097 / 339200
E6 = B6 - 187 / 2100
E7 = -1 / 40

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


def sparse_pair(A: np.ndarray, B: np.ndarray):
    """Row-compressed storage of A and B on their joint sparsity pattern."""
    mask = (A != 0) | (B != 0)
    rows, cols = np.nonzero(mask)
    indptr = np.zeros(A.shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return (indptr, cols.astype(np.int64), np.ascontiguousarray(A[rows, cols], dtype=np.complex128),
            np.ascontiguousarray(B[rows, cols], dtype=np.complex128))


@njit(cache=True)
def _rhs(indptr, indices, avals, bvals, s, y, out):
    n, m = y.shape
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            a = avals[p] + s * bvals[p]
            k = indices[p]
            for j in range(m):
                out[i, j] += a * y[k, j]


@njit(cache=True)
def _initial_step(ip, ix, av, bv, t0, tref, y, span, rtol, atol):
    f0 = np.empty_like(y)
    _rhs(ip, ix, av, bv, t0 - tref, y, f0)
    d0 = 0.0
    d1 = 0.0
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            sc = atol + rtol * abs(y[i, j])
            d0 += (abs(y[i, j]) / sc) ** 2
            d1 += (abs(f0[i, j]) / sc) ** 2
    d0 = np.sqrt(d0 / y.size)
    d1 = np.sqrt(d1 / y.size)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = np.empty_like(y)
    _rhs(ip, ix, av, bv, t0 + h0 - tref, y + h0 * f0, f1)
    d2 = 0.0
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            sc = atol + rtol * abs(y[i, j])
            d2 += (abs(f1[i, j] - f0[i, j]) / sc) ** 2
    d2 = np.sqrt(d2 / y.size) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


@njit(cache=True)
def dp5_linear(ip, ix, av, bv, tref, t0, t1, y0, h, rtol, atol, sample_times, samples):
    """Integrate y' = (A + (t - tref) B) y from t0 to t1, with A and B given
    in the joint row-compressed form of :func:`sparse_pair`.

    States at ``sample_times`` (sorted, inside [t0, t1]) are written to
    ``samples``. ``h <= 0`` requests an automatic first step. Returns
    (y(t1), next step size, accepted steps, rejected steps, status) with
    status 0 on success and 1 on step-size underflow.
    """
    n, m = y0.shape
    y = y0.copy()
    y_new = np.empty_like(y)
    tmp = np.empty_like(y)
    k1 = np.empty_like(y)
    k2 = np.empty_like(y)
    k3 = np.empty_like(y)
    k4 = np.empty_like(y)
    k5 = np.empty_like(y)
    k6 = np.empty_like(y)
    k7 = np.empty_like(y)
    t = t0
    k = 0
    nsamp = sample_times.shape[0]
    while k < nsamp and sample_times[k] <= t:
        samples[k] = y
        k += 1
    if t1 <= t:
        return y, h, 0, 0, 0
    if h <= 0.0:
        h = _initial_step(ip, ix, av, bv, t0, tref, y, t1 - t0, rtol, atol)
    _rhs(ip, ix, av, bv, t - tref, y, k1)
    nacc = 0
    nrej = 0
    en = 0.0
    while t < t1:
        stop = sample_times[k] if k < nsamp else t1
        hs = min(h, stop - t)
        hit = hs == stop - t
        while True:
            if hs < MIN_STEP and stop - t > MIN_STEP:
                return y, hs, nacc, nrej, 1
            for i in range(n):
                for j in range(m):
                    tmp[i, j] = y[i, j] + hs * (A21 * k1[i, j])
            _rhs(ip, ix, av, bv, t + C2 * hs - tref, tmp, k2)
            for i in range(n):
                for j in range(m):
                    tmp[i, j] = y[i, j] + hs * (A31 * k1[i, j] + A32 * k2[i, j])
            _rhs(ip, ix, av, bv, t + C3 * hs - tref, tmp, k3)
            for i in range(n):
                for j in range(m):
                    tmp[i, j] = y[i, j] + hs * (A41 * k1[i, j] + A42 * k2[i, j] + A43 * k3[i, j])
            _rhs(ip, ix, av, bv, t + C4 * hs - tref, tmp, k4)
            for i in range(n):
                for j in range(m):
                    tmp[i, j] = y[i, j] + hs * (A51 * k1[i, j] + A52 * k2[i, j] + A53 * k3[i, j]
                                                + A54 * k4[i, j])
            _rhs(ip, ix, av, bv, t + C5 * hs - tref, tmp, k5)
            for i in range(n):
                for j in range(m):
                    tmp[i, j] = y[i, j] + hs * (A61 * k1[i, j] + A62 * k2[i, j] + A63 * k3[i, j]
                                                + A64 * k4[i, j] + A65 * k5[i, j])
            _rhs(ip, ix, av, bv, t + hs - tref, tmp, k6)
            for i in range(n):
                for j in range(m):
                    y_new[i, j] = y[i, j] + hs * (B1 * k1[i, j] + B3 * k3[i, j] + B4 * k4[i, j]
                                                  + B5 * k5[i, j] + B6 * k6[i, j])
            _rhs(ip, ix, av, bv, t + hs - tref, y_new, k7)
            acc = 0.0
            for i in range(n):
                for j in range(m):
                    e = hs * (E1 * k1[i, j] + E3 * k3[i, j] + E4 * k4[i, j] + E5 * k5[i, j]
                              + E6 * k6[i, j] + E7 * k7[i, j])
                    sc = atol + rtol * max(abs(y[i, j]), abs(y_new[i, j]))
                    acc += (abs(e) / sc) ** 2
            en = np.sqrt(acc / (n * m))
            if en <= 1.0:
                break
            nrej += 1
            hs = hs * max(MIN_FACTOR, SAFETY * en ** -0.2)
            hit = False
        nacc += 1
        t = stop if hit else t + hs
        y[:, :] = y_new
        k1[:, :] = k7  # first same as last
        factor = MAX_FACTOR if en == 0.0 else min(MAX_FACTOR, SAFETY * en ** -0.2)
        # a step clipped to land on a sample point says little about the natural step
        if not hit or hs >= h:
            h = hs * factor
        while k < nsamp and sample_times[k] <= t + 1e-12:
            samples[k] = y
            k += 1
    return y, h, nacc, nrej, 0


class LinearPiecewiseIntegrator:
    """Integrates across pieces on which the generator is affine in time.

    ``pieces`` is a sequence of (a, b, A, B, t_ref): on [a, b] the generator
    is A + (t - t_ref) B. Step size carries over from one piece to the next.
    """

    def __init__(self, rtol: float = RTOL, atol: float = ATOL):
        self.rtol = rtol
        self.atol = atol
        self.h = 0.0
        self.n_steps = 0
        self.n_rejected = 0

    def run(self, pieces, y0: np.ndarray, sample_times: Sequence[float] = ()) -> tuple[np.ndarray, np.ndarray]:
        y = np.ascontiguousarray(y0, dtype=np.complex128)
        squeeze = y.ndim == 1
        if squeeze:
            y = y.reshape(-1, 1)
        times = np.asarray(sample_times, dtype=float)
        out = np.empty((len(times),) + y.shape, dtype=np.complex128)
        first = True
        cache: dict[tuple[int, int], tuple] = {}
        for a, b, A, B, tref in pieces:
            if b <= a:
                continue
            sel = (times >= a) if first else (times > a)
            idx = np.nonzero(sel & (times <= b))[0]
            seg = np.empty((len(idx),) + y.shape, dtype=np.complex128)
            key = (id(A), id(B))
            if key not in cache:
                cache[key] = sparse_pair(A, B)
            y, self.h, nacc, nrej, status = dp5_linear(
                *cache[key], float(tref), float(a), float(b), y, self.h, self.rtol, self.atol, times[idx], seg
            )
            self.n_steps += nacc
            self.n_rejected += nrej
            if status:
                raise IntegrationError(f"step size underflow in [{a:g}, {b:g}] ns (h={self.h:.3g} ns)")
            out[idx] = seg
            first = False
        if squeeze:
            return y[:, 0], out[:, :, 0]
        return y, out


def integrate_linear(A: np.ndarray, y0: np.ndarray, t0: float, t1: float,
                     sample_times: Sequence[float] = (), B: np.ndarray | None = None,
                     t_ref: float = 0.0, rtol: float = RTOL, atol: float = ATOL):
    """Convenience wrapper for a single affine piece."""
    A = np.ascontiguousarray(A, dtype=np.complex128)
    B = np.zeros_like(A) if B is None else np.ascontiguousarray(B, dtype=np.complex128)
    return LinearPiecewiseIntegrator(rtol, atol).run([(t0, t1, A, B, t_ref)], y0, sample_times)
