"""Scenario files: JSON with ``//`` and ``/* */`` comments.

Frequencies in a scenario are ordinary frequencies in MHz (``gamma_P: 24``
means 2*pi*24 MHz) and times are in ns; they are converted to rad/ns on load.
Every section is optional and falls back to the defaults below. Unknown keys
are rejected.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .atom import (
    MU_B_OVER_H,
    PERPENDICULAR,
    AtomModel,
    LaserField,
    Transition,
    mhz_to_rad_per_ns,
)
from .dynamics import Leakage, Phase, PulseSequence, Source
from .photostream import DetectorModel


class ScenarioError(ValueError):
    """Invalid scenario file; the message names the offending key or line."""


DEFAULTS: dict[str, Any] = {
    "atom": {"g_S": 2.0, "g_P": 2.0 / 3.0, "g_D": 0.8, "gamma_P": 24.0, "branching_S": 0.936,
             "B_field": 2.2, "mu_B_over_h": MU_B_OVER_H, "beat_override": None},
    "lasers": [
        {"transition": "blue_397", "rabi_peak": 144.0, "detuning": -36.0, "polarization": "perpendicular"},
        {"transition": "ir_866", "rabi_peak": 36.0, "detuning": -55.0, "polarization": "perpendicular"},
    ],
    "sequence": {
        "phases": [{"duration": 400.0, "blue_scale": 0.1, "ir_scale": 1.0},
                   {"duration": 1000.0, "blue_scale": 1.0, "ir_scale": 0.0},
                   {"duration": 600.0, "blue_scale": 0.0, "ir_scale": 1.0}],
        "repetition_period": 2000.0,
        "leakage": {"fraction": 0.0, "duration": 0.0},
        "switching_edge": 10.0,
    },
    "detectors": [
        {"efficiency": 1.0, "dark_rate": 0.0, "gate_windows": "emission", "jitter_sigma": 0.0, "resolution": 1.0},
        {"efficiency": 1.0, "dark_rate": 0.0, "gate_windows": "emission", "jitter_sigma": 0.0, "resolution": 1.0},
    ],
    "simulation": {"dt": 1.0, "seed": 0, "n_sequences": 100000, "correlation_dt": 5.0},
    "analysis": {"bin": 25.0, "range": [-1000.0, 1000.0], "wavepacket_bin": 10.0, "t1_window": None,
                 "g1_window": None, "overlap": 1.0, "dark_fraction": None, "peak_halfwidth": None,
                 "scan_rabi": [], "scan_reference": None},
    "outputs": {"directory": "out", "formats": ["csv"]},
}

_POLARIZATIONS = {
    "perpendicular": PERPENDICULAR,
    "sigma_plus": (0.0, 0.0, 1.0),
    "sigma_minus": (1.0, 0.0, 0.0),
    "pi": (0.0, 1.0, 0.0),
}


def strip_comments(text: str) -> str:
    """Blank out comments, keeping line and column positions intact."""
    out = []
    i, n = 0, len(text)
    in_str = False
    while i < n:
        c = text[i]
        if in_str:
            out.append(c)
            if c == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 2
                continue
            if c == '"':
                in_str = False
            i += 1
        elif c == '"':
            in_str = True
            out.append(c)
            i += 1
        elif text.startswith("//", i):
            j = text.find("\n", i)
            j = n if j < 0 else j
            out.append(" " * (j - i))
            i = j
        elif text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                line = text.count("\n", 0, i) + 1
                raise ScenarioError(f"line {line}: unterminated block comment")
            j += 2
            out.append("".join(ch if ch == "\n" else " " for ch in text[i:j]))
            i = j
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _merge(path: str, user: Any, default: Any) -> Any:
    """Overlay ``user`` on ``default``, rejecting keys the default lacks."""
    if isinstance(default, dict):
        if not isinstance(user, dict):
            raise ScenarioError(f"{path}: expected an object")
        unknown = sorted(set(user) - set(default))
        if unknown:
            raise ScenarioError(f"{path}.{unknown[0]}: unknown key" if path else f"{unknown[0]}: unknown key")
        return {k: _merge(f"{path}.{k}" if path else k, user[k], v) if k in user else v
                for k, v in default.items()}
    return user


def _merge_list(path: str, items: Any, template: dict) -> list[dict]:
    if not isinstance(items, list):
        raise ScenarioError(f"{path}: expected a list")
    return [_merge(f"{path}[{i}]", it, template) for i, it in enumerate(items)]


@dataclass(frozen=True)
class SimulationSettings:
    dt: float = 1.0  # ns, population sampling step
    seed: int = 0
    n_sequences: int = 100000
    correlation_dt: float = 5.0  # ns, grid of the two-time correlation


@dataclass(frozen=True)
class AnalysisSettings:
    bin: float = 25.0
    range: tuple[float, float] = (-1000.0, 1000.0)
    wavepacket_bin: float = 10.0
    t1_window: tuple[float, float] | None = None
    g1_window: tuple[float, float] | None = None
    overlap: float = 1.0
    dark_fraction: float | None = None  # calibrate dark counts to this share of ni coincidences
    peak_halfwidth: float | None = None  # ns, HBT peak integration half-width
    scan_rabi: tuple[float, ...] = ()  # rad/ns
    scan_reference: float | None = None  # rad/ns


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "out"
    formats: tuple[str, ...] = ("csv",)


@dataclass(frozen=True)
class Scenario:
    atom: AtomModel
    lasers: tuple[LaserField, ...]
    sequence: PulseSequence
    detectors: tuple[DetectorModel, ...]
    simulation: SimulationSettings = SimulationSettings()
    analysis: AnalysisSettings = AnalysisSettings()
    outputs: OutputSettings = OutputSettings()
    digest: str = ""
    path: str = ""
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def source(self) -> Source:
        return Source(self.atom, self.lasers, self.sequence)

    def with_seed(self, seed: int) -> Scenario:
        return replace(self, simulation=replace(self.simulation, seed=int(seed)))


def _pair(path: str, v: Any) -> tuple[float, float] | None:
    if v is None:
        return None
    if not (isinstance(v, list) and len(v) == 2):
        raise ScenarioError(f"{path}: expected [start, end]")
    return float(v[0]), float(v[1])


def _polarization(path: str, v: Any) -> tuple[complex, complex, complex]:
    if isinstance(v, str):
        if v not in _POLARIZATIONS:
            raise ScenarioError(f"{path}: unknown polarization {v!r}")
        return _POLARIZATIONS[v]
    if isinstance(v, list) and len(v) == 3:
        return tuple(complex(*c) if isinstance(c, list) else complex(c) for c in v)
    raise ScenarioError(f"{path}: expected a name or three [re, im] components")


def _build(path: str, fn, **kw):
    try:
        return fn(**kw)
    except ScenarioError:
        raise
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{path}: {e}") from None


def build_scenario(data: dict, digest: str = "", path: str = "") -> Scenario:
    """Validate a parsed scenario dictionary and convert its units."""
    d = _merge("", data, {k: v for k, v in DEFAULTS.items() if k not in ("lasers", "detectors")}
               | {"lasers": None, "detectors": None})
    lasers_raw = _merge_list("lasers", data.get("lasers", DEFAULTS["lasers"]), DEFAULTS["lasers"][0])
    dets_raw = _merge_list("detectors", data.get("detectors", DEFAULTS["detectors"]), DEFAULTS["detectors"][0])

    a = d["atom"]
    atom = _build("atom", AtomModel, g_S=float(a["g_S"]), g_P=float(a["g_P"]), g_D=float(a["g_D"]),
                  gamma_P=mhz_to_rad_per_ns(float(a["gamma_P"])), branching_S=float(a["branching_S"]),
                  B_field=float(a["B_field"]), mu_B_over_h=float(a["mu_B_over_h"]),
                  beat_override=None if a["beat_override"] is None else float(a["beat_override"]))

    lasers = []
    for i, l in enumerate(lasers_raw):
        p = f"lasers[{i}]"
        if l["transition"] not in {t.value for t in Transition}:
            raise ScenarioError(f"{p}.transition: unknown transition {l['transition']!r}")
        lasers.append(_build(p, LaserField, transition=l["transition"],
                             rabi_peak=mhz_to_rad_per_ns(float(l["rabi_peak"])),
                             detuning=mhz_to_rad_per_ns(float(l["detuning"])),
                             polarization=_polarization(f"{p}.polarization", l["polarization"])))

    s = d["sequence"]
    phases = []
    if not (isinstance(s["phases"], list) and len(s["phases"]) == 3):
        raise ScenarioError("sequence.phases: need exactly three phases (I cool, II prepare, III emit)")
    for i, ph in enumerate(s["phases"]):
        ph = _merge(f"sequence.phases[{i}]", ph, DEFAULTS["sequence"]["phases"][i])
        phases.append(_build(f"sequence.phases[{i}]", Phase, duration=float(ph["duration"]),
                             blue_scale=float(ph["blue_scale"]), ir_scale=float(ph["ir_scale"])))
    lk = s["leakage"]
    leakage = _build("sequence.leakage", Leakage, fraction=float(lk["fraction"]), duration=float(lk["duration"]))
    sequence = _build("sequence", PulseSequence, phases=tuple(phases),
                      repetition_period=float(s["repetition_period"]), leakage=leakage,
                      switching_edge=float(s["switching_edge"]))

    detectors = []
    for i, dr in enumerate(dets_raw):
        p = f"detectors[{i}]"
        gw = dr["gate_windows"]
        if gw == "emission":
            gw = [list(sequence.emission_window)]
        elif not isinstance(gw, list):
            raise ScenarioError(f"{p}.gate_windows: expected a list of [start, end] or \"emission\"")
        wins = tuple(_pair(f"{p}.gate_windows[{j}]", w) for j, w in enumerate(gw))
        det = _build(p, DetectorModel, efficiency=float(dr["efficiency"]), dark_rate=float(dr["dark_rate"]),
                     gate_windows=wins, jitter_sigma=float(dr["jitter_sigma"]),
                     resolution=float(dr["resolution"]))
        try:
            det.validate_period(sequence.repetition_period)
        except ValueError as e:
            raise ScenarioError(f"{p}: {e}") from None
        detectors.append(det)

    sim = d["simulation"]
    try:
        seed, n_seq = int(sim["seed"]), int(sim["n_sequences"])
    except (TypeError, ValueError):
        raise ScenarioError("simulation: seed and n_sequences must be integers") from None
    if not 0 <= seed < 2**64:
        raise ScenarioError("simulation.seed: must be an unsigned 64-bit integer")
    if n_seq < 1:
        raise ScenarioError("simulation.n_sequences: must be at least 1")
    if not (float(sim["dt"]) > 0 and float(sim["correlation_dt"]) > 0):
        raise ScenarioError("simulation: dt and correlation_dt must be positive")
    simulation = SimulationSettings(float(sim["dt"]), seed, n_seq, float(sim["correlation_dt"]))

    an = d["analysis"]
    rng = _pair("analysis.range", an["range"])
    if not (float(an["bin"]) > 0 and float(an["wavepacket_bin"]) > 0):
        raise ScenarioError("analysis: bin widths must be positive")
    if rng[1] <= rng[0]:
        raise ScenarioError("analysis.range: end must exceed start")
    if not 0.0 <= float(an["overlap"]) <= 1.0:
        raise ScenarioError("analysis.overlap: must lie in [0, 1]")
    if an["dark_fraction"] is not None and not 0.0 <= float(an["dark_fraction"]) < 1.0:
        raise ScenarioError("analysis.dark_fraction: must lie in [0, 1)")
    analysis = AnalysisSettings(
        bin=float(an["bin"]), range=rng, wavepacket_bin=float(an["wavepacket_bin"]),
        t1_window=_pair("analysis.t1_window", an["t1_window"]),
        g1_window=_pair("analysis.g1_window", an["g1_window"]),
        overlap=float(an["overlap"]),
        dark_fraction=None if an["dark_fraction"] is None else float(an["dark_fraction"]),
        peak_halfwidth=None if an["peak_halfwidth"] is None else float(an["peak_halfwidth"]),
        scan_rabi=tuple(mhz_to_rad_per_ns(float(x)) for x in an["scan_rabi"]),
        scan_reference=None if an["scan_reference"] is None else mhz_to_rad_per_ns(float(an["scan_reference"])),
    )

    o = d["outputs"]
    formats = tuple(o["formats"])
    bad = [f for f in formats if f not in ("csv", "binary")]
    if bad:
        raise ScenarioError(f"outputs.formats: unknown format {bad[0]!r}")
    outputs = OutputSettings(str(o["directory"]), formats)

    try:
        Source(atom, tuple(lasers), sequence)
    except ValueError as e:
        raise ScenarioError(f"lasers: {e}") from None
    return Scenario(atom, tuple(lasers), sequence, tuple(detectors), simulation, analysis, outputs,
                    digest, path, data)


def parse_scenario(path: str | Path) -> Scenario:
    """Read, validate and unit-convert a scenario file."""
    path = Path(path)
    blob = path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ScenarioError(f"{path}: not UTF-8 ({e})") from None
    try:
        data = json.loads(strip_comments(text))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    return build_scenario(data, digest, str(path))
