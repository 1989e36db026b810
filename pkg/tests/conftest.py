from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ramansource.atom import AtomModel, LaserField, mhz_to_rad_per_ns
from ramansource.dynamics import (
    Leakage,
    Phase,
    PulseSequence,
    Source,
    TwoTimeCorrelation,
    simulate_sequence,
)
from ramansource.scenario import parse_scenario

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


def make_source(ir_rabi=1.5, leakage=(0.0, 0.0), phases=(400.0, 1000.0, 600.0), period=2000.0,
                blue_cool=0.1, B=2.2):
    atom = AtomModel(B_field=B)
    g = atom.gamma_P
    lasers = (LaserField("blue_397", 6 * g, -1.5 * g), LaserField("ir_866", ir_rabi * g, mhz_to_rad_per_ns(-55.0)))
    seq = PulseSequence((Phase(phases[0], blue_cool, 1.0), Phase(phases[1], 1.0, 0.0), Phase(phases[2], 0.0, 1.0)),
                        period, Leakage(*leakage))
    return Source(atom, lasers, seq)


def synthetic_G(t2, beat_mhz=None, dt=10.0, n=201):
    t = np.arange(n) * dt
    tau = t.copy()
    env = np.exp(-tau / t2)
    g = env if beat_mhz is None else env * 0.5 * (1 + np.exp(2j * np.pi * beat_mhz * 1e-3 * tau))
    nn = np.exp(-t / 300.0)
    G = nn[:, None] * g[None, :]
    return TwoTimeCorrelation(t, tau, G.astype(complex), np.zeros_like(G.real))


@pytest.fixture(scope="session")
def source():
    return make_source()


@pytest.fixture(scope="session")
def source_result(source):
    return simulate_sequence(source)


@pytest.fixture(scope="session")
def leaky_source():
    return make_source(leakage=(0.05, 200.0))


@pytest.fixture(scope="session")
def fig4():
    return parse_scenario(SCENARIOS / "fig4.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
