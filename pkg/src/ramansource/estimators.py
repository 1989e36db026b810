"""scikit-learn style wrappers around the analysis routines.

``ExponentialTail`` fits a wavepacket tail (``fit``/``predict``/``score``),
``Detector`` turns emission records into click streams (``transform``) and
``Coherence`` summarizes a two-time correlation (``fit``). Parameters are
plain constructor arguments, so ``get_params``/``set_params``/``clone`` work.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import (
    check_array,
    check_consistent_length,
    check_is_fitted,
)

from .correlator import (
    WavepacketEstimate,
    auto_window,
    fit_exponential_tail,
    g1_summary,
)
from .dynamics import TwoTimeCorrelation
from .photostream import DetectorModel, EmissionRecord, TimeTagStream, detect


def check_tau(X) -> np.ndarray:
    """Delays as a 1-D float array; accepts shape (n,) or (n, 1)."""
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single delay column, got {X.shape[1]}")
        X = X[:, 0]
    return X


def check_window(window) -> tuple[float, float] | None:
    if window is None:
        return None
    a, b = (float(v) for v in window)
    if not b > a:
        raise ValueError(f"window end must exceed start, got {window}")
    return a, b


class ExponentialTail(RegressorMixin, BaseEstimator):
    """Exponential fit of a rate histogram, r(tau) = A exp(-gamma tau).

    ``fit(tau, rate, counts=None)``; with ``window=None`` the tail window is
    chosen automatically. After fitting: ``gamma_``, ``t1_``, ``gamma_err_``,
    ``amplitude_``, ``covariance_``, ``window_``.
    """

    def __init__(self, window=None):
        self.window = window

    def fit(self, X, y, counts=None):
        tau = check_tau(X)
        rate = check_array(y, ensure_2d=False, dtype=float)
        check_consistent_length(tau, rate)
        if counts is not None:
            counts = check_array(counts, ensure_2d=False, dtype=float)
            check_consistent_length(tau, counts)
        win = check_window(self.window) or auto_window(tau, rate)
        fit = fit_exponential_tail(WavepacketEstimate(tau, rate, counts), win)
        self.gamma_, self.t1_ = fit.gamma, fit.t1
        self.gamma_err_, self.t1_err_ = fit.gamma_err, fit.t1_err
        self.covariance_ = fit.covariance
        self.window_ = fit.window
        m = (tau >= win[0] - 1e-9) & (tau <= win[1] + 1e-9) & (rate > 0)
        self.amplitude_ = float(np.exp(np.mean(np.log(rate[m]) + fit.gamma * tau[m])))
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "gamma_")
        return self.amplitude_ * np.exp(-self.gamma_ * check_tau(X))


class Detector(TransformerMixin, BaseEstimator):
    """Detector model as a transformer from ``EmissionRecord`` to ``TimeTagStream``."""

    def __init__(self, efficiency=1.0, dark_rate=0.0, gate_windows=(), jitter_sigma=0.0, resolution=1.0,
                 seed=0, detector_id=0):
        self.efficiency = efficiency
        self.dark_rate = dark_rate
        self.gate_windows = gate_windows
        self.jitter_sigma = jitter_sigma
        self.resolution = resolution
        self.seed = seed
        self.detector_id = detector_id

    def fit(self, X=None, y=None):
        self.model_ = DetectorModel(float(self.efficiency), float(self.dark_rate),
                                    tuple(tuple(w) for w in self.gate_windows), float(self.jitter_sigma),
                                    float(self.resolution))
        return self

    def transform(self, X: EmissionRecord) -> TimeTagStream:
        check_is_fitted(self, "model_")
        if not isinstance(X, EmissionRecord):
            raise TypeError(f"expected an EmissionRecord, got {type(X).__name__}")
        return detect(X, self.model_, self.seed, self.detector_id)


class Coherence(BaseEstimator):
    """First-order coherence of a two-time correlation: ``g1_``, ``t2_``, ``beat_mhz_``."""

    def __init__(self, fit_window=None, floor=1e-2, pad=16):
        self.fit_window = fit_window
        self.floor = floor
        self.pad = pad

    def fit(self, X: TwoTimeCorrelation, y=None):
        if not isinstance(X, TwoTimeCorrelation):
            raise TypeError(f"expected a TwoTimeCorrelation, got {type(X).__name__}")
        s = g1_summary(X, check_window(self.fit_window), float(self.floor), int(self.pad))
        self.summary_ = s
        self.tau_, self.g1_ = s.tau, s.g1
        self.t2_, self.t2_err_ = s.t2, s.t2_err
        self.beat_mhz_ = s.beat_mhz
        return self
