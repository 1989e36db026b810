"""Simulator and analysis toolkit for a trapped-ion spontaneous-Raman single-photon source."""
from .atom import (
                   AtomModel,
                   CGEntry,
                   JumpOperator,
                   LaserField,
                   Manifold,
                   Polarization,
                   Transition,
                   ZeemanLevel,
                   build_hamiltonian,
                   build_jump_operators,
                   build_level_table,
                   cg_table,
                   mhz_to_rad_per_ns,
                   rad_per_ns_to_mhz,
)
from .correlator import (
                   CorrelationHistogram,
                   FitError,
                   TwoPhotonResult,
                   WavepacketEstimate,
                   accidentals_budget,
                   arrival_histogram,
                   cross_correlate,
                   fit_exponential_tail,
                   g1_summary,
                   hom_coincidence_model,
                   linearity_scan,
)
from .dynamics import (
                   Leakage,
                   Phase,
                   PopulationTrace,
                   PulseSequence,
                   Source,
                   TwoTimeCorrelation,
                   evolve_master,
                   simulate_sequence,
                   steady_state,
                   two_time_correlation,
)
from .estimators import Coherence, Detector, ExponentialTail
from .photostream import (
                   DetectorModel,
                   EmissionEvent,
                   EmissionRecord,
                   TimeTagStream,
                   detect,
                   split_hbt,
)
from .scenario import Scenario, ScenarioError, parse_scenario
from .trajectories import quantum_jump_trajectories

__all__ = [
                   "AtomModel",
                   "CGEntry",
                   "Coherence",
                   "CorrelationHistogram",
                   "Detector",
                   "DetectorModel",
                   "EmissionEvent",
                   "EmissionRecord",
                   "ExponentialTail",
                   "FitError",
                   "JumpOperator",
                   "LaserField",
                   "Leakage",
                   "Manifold",
                   "Phase",
                   "Polarization",
                   "PopulationTrace",
                   "PulseSequence",
                   "Scenario",
                   "ScenarioError",
                   "Source",
                   "TimeTagStream",
                   "Transition",
                   "TwoPhotonResult",
                   "TwoTimeCorrelation",
                   "WavepacketEstimate",
                   "ZeemanLevel",
                   "accidentals_budget",
                   "arrival_histogram",
                   "build_hamiltonian",
                   "build_jump_operators",
                   "build_level_table",
                   "cg_table",
                   "cross_correlate",
                   "detect",
                   "evolve_master",
                   "fit_exponential_tail",
                   "g1_summary",
                   "hom_coincidence_model",
                   "linearity_scan",
                   "mhz_to_rad_per_ns",
                   "parse_scenario",
                   "quantum_jump_trajectories",
                   "rad_per_ns_to_mhz",
                   "simulate_sequence",
                   "split_hbt",
                   "steady_state",
                   "two_time_correlation",
]
