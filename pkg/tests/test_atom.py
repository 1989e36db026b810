from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ramansource.atom import (
    DETECTED_CHANNEL,
    N_LEVELS,
    P_IDX,
    S_IDX,
    AtomModel,
    LaserField,
    Manifold,
    Polarization,
    Transition,
    build_hamiltonian,
    build_jump_operators,
    build_level_table,
    cg_table,
    level_index,
    mhz_to_rad_per_ns,
)

unit = st.floats(0.0, 1.0)
freq = st.floats(-2.0, 2.0)


@st.composite
def polarizations(draw):
    re = draw(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    im = draw(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    v = np.array(re) + 1j * np.array(im)
    n = np.linalg.norm(v)
    if n < 1e-3:
        v, n = np.array([1, 0, 1], dtype=complex), np.sqrt(2)
    return tuple(v / n)


@st.composite
def atoms(draw):
    return AtomModel(g_S=draw(st.floats(0.5, 3)), g_P=draw(st.floats(0.1, 2)), g_D=draw(st.floats(0.1, 2)),
                     gamma_P=draw(st.floats(0.01, 1)), branching_S=draw(st.floats(0.01, 0.99)),
                     B_field=draw(st.floats(-10, 10)))


@st.composite
def lasers(draw):
    return [LaserField("blue_397", draw(st.floats(0, 2)), draw(freq), draw(polarizations())),
            LaserField("ir_866", draw(st.floats(0, 2)), draw(freq), draw(polarizations()))]


def test_level_table_order_and_counts():
    levels = build_level_table(AtomModel())
    assert [l.index for l in levels] == list(range(8))
    assert [l.manifold for l in levels].count(Manifold.S12) == 2
    assert [l.manifold for l in levels].count(Manifold.P12) == 2
    assert [l.manifold for l in levels].count(Manifold.D32) == 4
    assert [l.m for l in levels] == [Fraction(-1, 2), Fraction(1, 2)] * 2 + [Fraction(k, 2) for k in (-3, -1, 1, 3)]


def test_zero_field_has_no_shifts():
    assert all(l.zeeman_shift == 0 for l in build_level_table(AtomModel(B_field=0.0)))


def test_d_splitting_landé_value():
    # 2 g_D mu_B B / h = 2 * 0.8 * 1.3996 * 2.2
    atom = AtomModel()
    lv = build_level_table(atom)
    split = lv[level_index(Manifold.D32, Fraction(1, 2))].zeeman_shift - lv[level_index(Manifold.D32, Fraction(-3, 2))].zeeman_shift
    assert split == pytest.approx(mhz_to_rad_per_ns(4.926592), rel=1e-9)
    assert atom.beat_splitting_mhz == pytest.approx(4.93, abs=5e-3)


def test_s_shift():
    lv = build_level_table(AtomModel())
    assert lv[1].zeeman_shift == pytest.approx(mhz_to_rad_per_ns(1.3996 * 2.2), rel=1e-12)


def test_beat_override():
    assert AtomModel(beat_override=7.5).beat_splitting_mhz == 7.5


@given(atoms())
def test_zeeman_antisymmetry(atom):
    a = build_level_table(atom)
    b = build_level_table(AtomModel(atom.g_S, atom.g_P, atom.g_D, atom.gamma_P, atom.branching_S, -atom.B_field))
    for x, y in zip(a, b):
        assert y.zeeman_shift == pytest.approx(-x.zeeman_shift, abs=1e-15)
    # antisymmetric in m within each manifold
    for lvl in a:
        partner = level_index(lvl.manifold, -lvl.m)
        assert a[partner].zeeman_shift == pytest.approx(-lvl.zeeman_shift, abs=1e-15)


def test_cg_tabulated_values():
    t = cg_table(AtomModel())
    p_minus = 2
    assert t[(p_minus, 0)].amplitude ** 2 == pytest.approx(1 / 3, abs=1e-12)
    assert t[(p_minus, 0)].polarization is Polarization.PI
    assert t[(p_minus, 1)].amplitude ** 2 == pytest.approx(2 / 3, abs=1e-12)
    assert t[(p_minus, 1)].polarization is not Polarization.PI
    assert t[(p_minus, 4)].amplitude ** 2 == pytest.approx(1 / 2, abs=1e-12)
    assert t[(p_minus, 5)].amplitude ** 2 == pytest.approx(1 / 3, abs=1e-12)
    assert t[(p_minus, 6)].amplitude ** 2 == pytest.approx(1 / 6, abs=1e-12)


def test_cg_sum_rules_and_selection():
    t = cg_table(AtomModel())
    levels = build_level_table(AtomModel())
    for u in P_IDX:
        for man in (Manifold.S12, Manifold.D32):
            total = sum(e.amplitude ** 2 for (uu, l), e in t.items() if uu == u and levels[l].manifold is man)
            assert total == pytest.approx(1.0, abs=1e-12)
    for (u, l), e in t.items():
        dm = levels[u].m - levels[l].m
        assert abs(dm) <= 1
        # delta m = -1 is labelled sigma_plus, +1 sigma_minus
        assert e.polarization.value == dm


def test_all_scales_zero_zero_field_resonant_is_zero():
    atom = AtomModel(B_field=0.0)
    ls = [LaserField("blue_397", 1.0, 0.0), LaserField("ir_866", 1.0, 0.0)]
    assert np.all(build_hamiltonian(atom, ls, [0.0, 0.0]) == 0)
    assert np.all(build_hamiltonian(atom, [], []) == 0)


def test_detuned_lasers_at_zero_scale_give_diagonal_h():
    atom = AtomModel(B_field=0.0)
    ls = [LaserField("blue_397", 1.0, -0.2), LaserField("ir_866", 1.0, -0.3)]
    h = build_hamiltonian(atom, ls, [0.0, 0.0])
    assert np.all(h == np.diag(np.diag(h)))


@given(atoms(), lasers(), unit, unit)
def test_hamiltonian_hermitian(atom, ls, sb, sr):
    h = build_hamiltonian(atom, ls, [sb, sr])
    assert np.max(np.abs(h - h.conj().T)) < 1e-12


def test_blue_perpendicular_couplings():
    atom = AtomModel()
    h = build_hamiltonian(atom, [LaserField("blue_397", 1.0, 0.0)], [1.0])
    off = [(i, j) for i in range(8) for j in range(i + 1, 8) if abs(h[i, j]) > 0]
    assert len(off) == 2  # S(-1/2)-P(+1/2), S(+1/2)-P(-1/2): sigma transitions only
    assert set(off) == {(0, 3), (1, 2)}


def test_two_lasers_on_one_transition_rejected():
    with pytest.raises(ValueError, match="one laser per transition"):
        build_hamiltonian(AtomModel(), [LaserField("ir_866", 1, 0), LaserField("ir_866", 1, 0)], [1, 1])


def test_polarization_normalization_enforced():
    with pytest.raises(ValueError, match="normalized"):
        LaserField("ir_866", 1.0, 0.0, (1.0, 0.0, 1.0))
    assert LaserField("ir_866", 1.0, 0.0).transition is Transition.IR_866


@given(atoms())
def test_jump_completeness(atom):
    jumps = build_jump_operators(atom)
    assert len(jumps) == 10
    total = sum(j.matrix.conj().T @ j.matrix for j in jumps)
    expected = np.zeros((N_LEVELS, N_LEVELS))
    for p in P_IDX:
        expected[p, p] = atom.gamma_P
    assert np.max(np.abs(total - expected)) < 1e-12


def test_detected_channel_rate():
    atom = AtomModel()
    jumps = build_jump_operators(atom)
    det = [j for j in jumps if j.detected]
    assert len(det) == 1
    assert (det[0].upper, det[0].lower) == DETECTED_CHANNEL == (2, 1)
    assert det[0].rate == pytest.approx(0.936 * atom.gamma_P * 2 / 3, rel=1e-12)
    assert atom.gamma_PS + atom.gamma_PD == atom.gamma_P
    assert all(j.upper in P_IDX and (j.lower in S_IDX or j.lower >= 4) for j in jumps)


def test_gamma_p_conversion():
    assert AtomModel().gamma_P == pytest.approx(2 * np.pi * 24e-3, rel=1e-15)


@pytest.mark.parametrize("kw", [{"gamma_P": 0.0}, {"branching_S": 1.0}, {"branching_S": 0.0}])
def test_atom_validation(kw):
    with pytest.raises(ValueError):
        AtomModel(**kw)
