import hashlib
import json

import numpy as np
import pytest
from conftest import SCENARIOS
from hypothesis import given
from hypothesis import strategies as st

from ramansource.atom import mhz_to_rad_per_ns
from ramansource.scenario import (
    DEFAULTS,
    ScenarioError,
    build_scenario,
    parse_scenario,
    strip_comments,
)


def write(tmp_path, text, name="s.json"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_scenario_uses_defaults(tmp_path):
    scn = parse_scenario(write(tmp_path, "{}"))
    assert scn.atom.gamma_P == pytest.approx(2 * np.pi * 24e-3)
    assert scn.sequence.repetition_period == DEFAULTS["sequence"]["repetition_period"]
    assert len(scn.detectors) == 2
    assert scn.detectors[0].gate_windows == (scn.sequence.emission_window,)
    assert scn.simulation.n_sequences == 100000


def test_frequencies_converted(tmp_path):
    scn = parse_scenario(write(tmp_path, '{"atom": {"gamma_P": 22.0}, '
                                         '"analysis": {"scan_rabi": [10, 20, 30, 40], "scan_reference": 40}}'))
    assert scn.atom.gamma_P == pytest.approx(mhz_to_rad_per_ns(22.0))
    assert scn.analysis.scan_rabi[1] == pytest.approx(2 * np.pi * 0.020)
    assert scn.lasers[1].rabi_peak == pytest.approx(2 * np.pi * 0.036)


def test_digest_is_file_sha256(tmp_path):
    p = write(tmp_path, '// comment\n{"simulation": {"seed": 4}}\n')
    assert parse_scenario(p).digest == hashlib.sha256(p.read_bytes()).hexdigest()


def test_comments_stripped(tmp_path):
    text = '/* block\n comment */ {\n "simulation": {"seed": 9}, // trailing\n "outputs": {"directory": "a//b"}}'
    scn = parse_scenario(write(tmp_path, text))
    assert scn.simulation.seed == 9
    assert scn.outputs.directory == "a//b"


@given(st.text(alphabet="ab/*\n \"", max_size=40))
def test_strip_comments_preserves_layout(text):
    try:
        out = strip_comments(text)
    except ScenarioError:
        return
    assert len(out) == len(text)
    assert [i for i, c in enumerate(out) if c == "\n"] == [i for i, c in enumerate(text) if c == "\n"]


def test_unknown_key_named(tmp_path):
    with pytest.raises(ScenarioError, match=r"sequence\.leakge: unknown key"):
        parse_scenario(write(tmp_path, '{"sequence": {"leakge": {}}}'))
    with pytest.raises(ScenarioError, match=r"detectors\[1\]\.eficiency"):
        parse_scenario(write(tmp_path, '{"detectors": [{}, {"eficiency": 0.5}]}'))


def test_syntax_error_reports_line(tmp_path):
    p = write(tmp_path, '{\n  "atom": {\n    "B_field": 2.2,\n  }\n}')
    with pytest.raises(ScenarioError, match=r"s\.json:4:3"):
        parse_scenario(p)


def test_overlapping_gates_rejected(tmp_path):
    with pytest.raises(ScenarioError, match=r"detectors\[0\].*gate_windows"):
        parse_scenario(write(tmp_path, '{"detectors": [{"gate_windows": [[0, 500], [400, 900]]}]}'))


def test_gate_outside_period_rejected(tmp_path):
    with pytest.raises(ScenarioError, match="gate_windows"):
        parse_scenario(write(tmp_path, '{"detectors": [{"gate_windows": [[1500, 2500]]}]}'))


@pytest.mark.parametrize("patch, where", [
    ({"sequence": {"repetition_period": 100.0}}, "sequence"),
    ({"sequence": {"phases": [{}, {}]}}, "sequence.phases"),
    ({"sequence": {"phases": [{"blue_scale": 2}, {}, {}]}}, r"sequence.phases\[0\]"),
    ({"simulation": {"seed": -1}}, "simulation.seed"),
    ({"simulation": {"n_sequences": 0}}, "simulation.n_sequences"),
    ({"analysis": {"overlap": 1.5}}, "analysis.overlap"),
    ({"analysis": {"range": [5, -5]}}, "analysis.range"),
    ({"outputs": {"formats": ["hdf5"]}}, "outputs.formats"),
    ({"lasers": [{"transition": "uv"}]}, r"lasers\[0\].transition"),
    ({"lasers": [{"polarization": "diagonal"}]}, r"lasers\[0\].polarization"),
    ({"lasers": [{}, {}]}, "lasers"),
])
def test_invalid_values_named(patch, where):
    with pytest.raises(ScenarioError, match=where):
        build_scenario(json.loads(json.dumps(patch)))


def test_with_seed():
    scn = build_scenario({})
    assert scn.with_seed(2**64 - 1).simulation.seed == 2**64 - 1
    assert scn.simulation.seed == 0


@pytest.mark.parametrize("name", ["fig2c.json", "fig3a.json", "fig3b-scan.json", "fig4.json"])
def test_shipped_scenarios_parse(name):
    scn = parse_scenario(SCENARIOS / name)
    assert scn.source.sequence.repetition_period > 0
    assert "CALIBRATED GUESS" in (SCENARIOS / name).read_text()
