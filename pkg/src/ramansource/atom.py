"""Level structure of 40Ca+ (S1/2, P1/2, D3/2), transition geometry and the
operators that drive the master equation.

Internal units: time in ns, angular frequencies in rad/ns.
"""
from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cache

import numpy as np
from sympy import Rational
from sympy.physics.quantum.cg import CG

MU_B_OVER_H = 1.3996  # MHz / G
TWO_PI = 2.0 * np.pi


def mhz_to_rad_per_ns(f_mhz: float) -> float:
    """Ordinary frequency in MHz -> angular frequency in rad/ns."""
    return TWO_PI * f_mhz * 1e-3


def rad_per_ns_to_mhz(w: float) -> float:
    return w / TWO_PI * 1e3


class Manifold(enum.Enum):
    S12 = "S12"
    P12 = "P12"
    D32 = "D32"


class Polarization(enum.Enum):
    # labels follow the emission convention: delta_m = m_upper - m_lower
    SIGMA_PLUS = -1
    PI = 0
    SIGMA_MINUS = +1


class Transition(enum.Enum):
    BLUE_397 = "blue_397"
    IR_866 = "ir_866"


_J = {Manifold.S12: Fraction(1, 2), Manifold.P12: Fraction(1, 2), Manifold.D32: Fraction(3, 2)}

# canonical ordering
LEVELS: tuple[tuple[Manifold, Fraction], ...] = (
    (Manifold.S12, Fraction(-1, 2)),
    (Manifold.S12, Fraction(1, 2)),
    (Manifold.P12, Fraction(-1, 2)),
    (Manifold.P12, Fraction(1, 2)),
    (Manifold.D32, Fraction(-3, 2)),
    (Manifold.D32, Fraction(-1, 2)),
    (Manifold.D32, Fraction(1, 2)),
    (Manifold.D32, Fraction(3, 2)),
)
N_LEVELS = len(LEVELS)
S_IDX = (0, 1)
P_IDX = (2, 3)
D_IDX = (4, 5, 6, 7)
MANIFOLD_IDX = {Manifold.S12: S_IDX, Manifold.P12: P_IDX, Manifold.D32: D_IDX}

# right-circular detection selects P(-1/2) -> S(+1/2)
DETECTED_CHANNEL = (2, 1)


def level_index(manifold: Manifold, m: Fraction | float) -> int:
    return LEVELS.index((manifold, Fraction(m).limit_denominator(2)))


@dataclass(frozen=True)
class ZeemanLevel:
    manifold: Manifold
    m: Fraction
    index: int
    zeeman_shift: float  # rad/ns

    @property
    def label(self) -> str:
        sign = "+" if self.m > 0 else "-"
        return f"{self.manifold.value[0]}({sign}{abs(self.m)})"


@dataclass(frozen=True)
class CGEntry:
    polarization: Polarization
    amplitude: float


@dataclass(frozen=True)
class AtomModel:
    """Zeeman-resolved S1/2 - P1/2 - D3/2 system.

    ``gamma_P`` is the total P1/2 decay rate in rad/ns and ``B_field`` is in
    gauss. ``beat_override`` (MHz) replaces the computed D-sublevel splitting
    wherever analyses need a default beat frequency.
    """

    g_S: float = 2.0
    g_P: float = 2.0 / 3.0
    g_D: float = 4.0 / 5.0
    gamma_P: float = mhz_to_rad_per_ns(24.0)
    branching_S: float = 0.936
    B_field: float = 2.2
    mu_B_over_h: float = MU_B_OVER_H
    beat_override: float | None = None

    def __post_init__(self):
        if not self.gamma_P > 0:
            raise ValueError(f"gamma_P must be positive, got {self.gamma_P}")
        if not 0.0 < self.branching_S < 1.0:
            raise ValueError(f"branching_S must lie in (0, 1), got {self.branching_S}")

    @property
    def gamma_PS(self) -> float:
        return self.branching_S * self.gamma_P

    @property
    def gamma_PD(self) -> float:
        return self.gamma_P - self.gamma_PS

    def g_factor(self, manifold: Manifold) -> float:
        return {Manifold.S12: self.g_S, Manifold.P12: self.g_P, Manifold.D32: self.g_D}[manifold]

    def zeeman_shift(self, manifold: Manifold, m: Fraction | float) -> float:
        return mhz_to_rad_per_ns(self.g_factor(manifold) * float(m) * self.mu_B_over_h * self.B_field)

    @property
    def beat_splitting_mhz(self) -> float:
        """Frequency difference of the two detected Raman channels, D(-3/2) and D(+1/2)."""
        if self.beat_override is not None:
            return float(self.beat_override)
        return 2.0 * self.g_D * self.mu_B_over_h * abs(self.B_field)

    @property
    def gamma_detected(self) -> float:
        u, l = DETECTED_CHANNEL
        return self.gamma_PS * cg_table(self)[(u, l)].amplitude ** 2


@dataclass(frozen=True)
class LaserField:
    """A single-frequency laser on one transition.

    ``rabi_peak`` is the angular Rabi frequency on the strongest Clebsch-Gordan
    channel for a pure polarization component; ``polarization`` holds the
    spherical components (a_-, a_0, a_+).
    """

    transition: Transition
    rabi_peak: float
    detuning: float
    polarization: tuple[complex, complex, complex] = (2**-0.5, 0.0, 2**-0.5)

    def __post_init__(self):
        pol = np.asarray(self.polarization, dtype=complex)
        if pol.shape != (3,):
            raise ValueError("polarization needs three spherical components")
        norm = float(np.sum(np.abs(pol) ** 2))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"polarization must be normalized, |a|^2 sums to {norm!r}")
        object.__setattr__(self, "transition", Transition(self.transition))
        object.__setattr__(self, "polarization", tuple(complex(a) for a in pol))


PERPENDICULAR = (2**-0.5, 0.0, 2**-0.5)


def build_level_table(atom: AtomModel) -> list[ZeemanLevel]:
    return [
        ZeemanLevel(manifold=man, m=m, index=i, zeeman_shift=atom.zeeman_shift(man, m))
        for i, (man, m) in enumerate(LEVELS)
    ]


@cache
def _cg(j1: Fraction, m1: Fraction, q: int, j: Fraction, m: Fraction) -> float:
    r = lambda x: Rational(x.numerator, x.denominator)
    return float(CG(r(j1), r(m1), 1, q, r(j), r(m)).doit())


@cache
def _cg_entries() -> dict[tuple[int, int], CGEntry]:
    entries: dict[tuple[int, int], CGEntry] = {}
    for u in P_IDX:
        mu = LEVELS[u][1]
        for lower in (Manifold.S12, Manifold.D32):
            for l in MANIFOLD_IDX[lower]:
                ml = LEVELS[l][1]
                q = mu - ml
                if abs(q) > 1:
                    continue
                amp = _cg(_J[lower], ml, int(q), _J[Manifold.P12], mu)
                if amp != 0.0:
                    entries[(u, l)] = CGEntry(Polarization(int(q)), amp)
    return entries


def cg_table(atom: AtomModel | None = None) -> dict[tuple[int, int], CGEntry]:
    """Dipole amplitudes <J_l m_l; 1 q | J_P m_u> keyed by (upper, lower) level index.

    For each P sublevel the squared amplitudes sum to one separately over the
    S1/2 and the D3/2 channels. The table does not depend on field or rates;
    ``atom`` is accepted for interface symmetry.
    """
    return dict(_cg_entries())


def _manifold_of(index: int) -> Manifold:
    return LEVELS[index][0]


def _frame_detunings(lasers: Sequence[LaserField]) -> tuple[float, float]:
    blue = [l for l in lasers if l.transition is Transition.BLUE_397]
    ir = [l for l in lasers if l.transition is Transition.IR_866]
    if len(blue) > 1 or len(ir) > 1:
        raise ValueError("at most one laser per transition (rotating frame would be ambiguous)")
    return (blue[0].detuning if blue else 0.0, ir[0].detuning if ir else 0.0)


def hamiltonian_parts(atom: AtomModel, lasers: Sequence[LaserField]) -> tuple[np.ndarray, dict[Transition, np.ndarray]]:
    """Split H into the static diagonal and one coupling matrix per laser at unit scale.

    H(scales) = H0 + sum_k scale_k * V_k.
    """
    det_b, det_r = _frame_detunings(lasers)
    h0 = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
    for lev in build_level_table(atom):
        offset = {Manifold.S12: 0.0, Manifold.P12: -det_b, Manifold.D32: -det_b + det_r}[lev.manifold]
        h0[lev.index, lev.index] = lev.zeeman_shift + offset

    table = cg_table(atom)
    couplings: dict[Transition, np.ndarray] = {}
    for laser in lasers:
        lower = Manifold.S12 if laser.transition is Transition.BLUE_397 else Manifold.D32
        chans = {k: v for k, v in table.items() if _manifold_of(k[1]) is lower}
        strongest = max(abs(v.amplitude) for v in chans.values())
        v = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
        for (u, l), entry in chans.items():
            # absorption l -> u picks the spherical component q = m_u - m_l
            q = entry.polarization.value
            a_q = laser.polarization[q + 1]
            v[u, l] += 0.5 * laser.rabi_peak * a_q * entry.amplitude / strongest
        couplings[laser.transition] = v + v.conj().T
    return h0, couplings


def build_hamiltonian(atom: AtomModel, lasers: Sequence[LaserField], amplitudes: Sequence[float]) -> np.ndarray:
    """Rotating-frame RWA Hamiltonian for the given per-laser amplitude scales."""
    if len(amplitudes) != len(lasers):
        raise ValueError("one amplitude scale per laser required")
    for s in amplitudes:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"amplitude scale {s} outside [0, 1]")
    h0, parts = hamiltonian_parts(atom, lasers)
    h = h0.copy()
    for laser, s in zip(lasers, amplitudes):
        h += s * parts[laser.transition]
    return h


@dataclass(frozen=True)
class JumpOperator:
    upper: int
    lower: int
    rate: float
    polarization: Polarization
    detected: bool
    matrix: np.ndarray = field(repr=False, compare=False)

    @property
    def label(self) -> str:
        lv = build_level_table(AtomModel(B_field=0.0))
        return f"{lv[self.upper].label}->{lv[self.lower].label}"


def build_jump_operators(atom: AtomModel) -> list[JumpOperator]:
    ops = []
    for (u, l), entry in sorted(cg_table(atom).items()):
        branch = atom.gamma_PS if _manifold_of(l) is Manifold.S12 else atom.gamma_PD
        rate = branch * entry.amplitude**2
        mat = np.zeros((N_LEVELS, N_LEVELS), dtype=complex)
        mat[l, u] = np.sqrt(rate)
        mat.flags.writeable = False
        ops.append(
            JumpOperator(u, l, rate, entry.polarization, (u, l) == DETECTED_CHANNEL, mat)
        )
    return ops


def detected_operator(atom: AtomModel) -> np.ndarray:
    """Lowering operator of the detected channel, scaled so <E^dag E> is the photon rate."""
    return next(op.matrix for op in build_jump_operators(atom) if op.detected).copy()
