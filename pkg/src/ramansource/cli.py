"""Command-line front end: ``ramansource <subcommand> --scenario FILE --out DIR``.

Exit codes: 0 success, 1 invalid scenario or input, 2 numerical failure,
64 usage error.
"""
from __future__ import annotations

import argparse
import json
import platform
import shutil
import sys
import tempfile
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import experiments as ex
from .correlator import (
    FitError,
    cross_correlate,
    write_columns,
    write_g1_csv,
    write_histogram_csv,
    write_model_csv,
    write_scan_csv,
    write_wavepacket_csv,
)
from .dynamics import DegenerateSteadyState, FixedPointError
from .integrate import IntegrationError
from .photostream import read_binary, read_csv, write_binary, write_csv
from .scenario import Scenario, ScenarioError, parse_scenario

SUBCOMMANDS = ("populations", "wavepacket", "scan-rate", "trajectories", "correlate", "hbt", "hom", "g1")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ramansource", description="Trapped-ion Raman single-photon source simulator.")
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    helps = {
        "populations": "population dynamics over one sequence",
        "wavepacket": "Monte Carlo photon arrival histogram and tail fit",
        "scan-rate": "Raman rate versus IR intensity",
        "trajectories": "quantum-jump click streams",
        "correlate": "cross-correlate stream files",
        "hbt": "single-source intensity autocorrelation",
        "hom": "two-source interference and coherence",
        "g1": "first-order coherence",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--scenario", required=name != "correlate", help="scenario JSON file")
        sp.add_argument("--out", help="output directory (default: scenario outputs.directory)")
        sp.add_argument("--seed", type=_u64, help="override simulation.seed")
        sp.add_argument("--format", choices=("csv", "binary"), help="stream format (trajectories only)")
        if name == "correlate":
            sp.add_argument("--input", action="append", required=True,
                            help="stream file (CSV or binary); give one or two")
            sp.add_argument("--bin", type=float, help="bin width in ns")
            sp.add_argument("--range", type=float, nargs=2, metavar=("MIN", "MAX"), help="delay range in ns")
        if name == "hom":
            sp.add_argument("--no-monte-carlo", action="store_true", help="regression model only")
    return p


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _versions() -> dict[str, str]:
    out = {"ramansource": _version(), "python": platform.python_version()}
    for mod in ("numpy", "scipy", "numba", "sympy", "scikit-learn"):
        try:
            out[mod] = metadata.version(mod)
        except metadata.PackageNotFoundError:
            pass
    return out


def _num(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    return x


# -- subcommands -----------------------------------------------------------
# each returns a dict of manifest results and writes files into ``out``

def _populations(scn: Scenario, out: Path, args) -> dict:
    r = ex.run_populations(scn)
    tr = r.result.trace
    write_columns(out / "populations.csv", ("t_ns", "S", "P", "D", "rate"),
                  (tr.times, tr.S, tr.P, tr.D, tr.emission_rate), scn.digest)
    return {"prepared_D": r.prepared_D, "detected_probability": r.detected_probability,
            "fixed_point_iterations": r.result.iterations}


def _wavepacket(scn: Scenario, out: Path, args) -> dict:
    r = ex.run_wavepacket(scn)
    write_wavepacket_csv(r.estimate, out / "wavepacket.csv", scn.digest)
    write_columns(out / "wavepacket_model.csv", ("tau_ns", "rate"), (r.model_tau, r.model_rate), scn.digest)
    f = r.estimate.fit
    return {"t1_ns": f.t1, "t1_err_ns": f.t1_err, "gamma_per_ns": f.gamma, "fit_window_ns": f.window,
            "model_t1_ns": r.model_t1, "detections": len(r.stream)}


def _scan(scn: Scenario, out: Path, args) -> dict:
    s = ex.run_scan(scn)
    write_scan_csv(s, out / "scan.csv", scn.digest)
    return {"t1_ns": s.t1, "gamma_oracle_per_ns": s.gamma_oracle, "slope_per_ns": s.slope,
            "r2": s.r2, "r2_centered": s.r2_centered}


def _trajectories(scn: Scenario, out: Path, args) -> dict:
    streams = ex.run_trajectories(scn)
    fmt = args.format or ("binary" if "binary" in scn.outputs.formats else "csv")
    if fmt == "csv":
        write_csv(streams, out / "streams.csv")
        files = ["streams.csv"]
    else:
        files = []
        for s in streams:
            name = f"stream{s.detector_id}.bin"
            write_binary(s, out / name)
            files.append(name)
    return {"format": fmt, "files": files, "clicks": [len(s) for s in streams]}


def _read_streams(path: str):
    p = Path(path)
    with open(p, "rb") as fh:
        magic = fh.read(4)
    return [read_binary(p)] if magic == b"RPST" else read_csv(p)


def _correlate(scn: Scenario | None, out: Path, args) -> dict:
    streams = [s for f in args.input for s in _read_streams(f)]
    if len(args.input) > 2 or len(streams) > 2:
        raise ValueError("correlate takes at most two streams")
    s1 = streams[0]
    s2 = streams[1] if len(streams) > 1 else streams[0]
    bin_ = args.bin or (scn.analysis.bin if scn else 25.0)
    rng = tuple(args.range) if args.range else (scn.analysis.range if scn else (-1000.0, 1000.0))
    h = cross_correlate(s1, s2, bin_, rng)
    digest = scn.digest if scn else s1.digest
    write_histogram_csv(h, out / "histogram.csv", digest)
    return {"pairs": float(h.counts.sum()), "records": [len(s1), len(s2)], "normalization": h.normalization,
            "digest_in": s1.digest}


def _hbt(scn: Scenario, out: Path, args) -> dict:
    r = ex.run_hbt(scn)
    write_histogram_csv(r.histogram, out / "hbt.csv", scn.digest)
    return {"central_counts": r.central_counts, "side_peak_counts": r.side_counts,
            "predicted_central_counts": r.predicted_central, "peak_halfwidth_ns": r.peak_halfwidth,
            "central_over_side": r.central_counts / r.side_counts if r.side_counts else None,
            "budget_fractions": r.budget.fractions}


def _hom(scn: Scenario, out: Path, args) -> dict:
    r = ex.run_hom(scn, monte_carlo=not args.no_monte_carlo)
    if r.mc_ni is not None:
        write_histogram_csv(r.mc_ni, out / "g2_ni.csv", scn.digest)
        write_histogram_csv(r.mc_int, out / "g2_int.csv", scn.digest)
    else:
        m = r.model
        write_model_csv(m.tau, m.p_ni, m.reference, out / "g2_ni.csv", scn.digest)
        write_model_csv(m.tau, m.p_int, m.reference, out / "g2_int.csv", scn.digest)
    write_g1_csv(r.g1, out / "g1.csv", scn.digest)
    return {"mode": "monte_carlo" if r.mc_ni is not None else "regression",
            "contrast": r.mc_contrast if r.mc_contrast is not None else r.model_contrast,
            "contrast_model": r.model_contrast, "contrast_signal_only": r.model.contrast,
            "contrast_monte_carlo": r.mc_contrast, "t1_ns": r.t1, "t1_monte_carlo_ns": r.mc_t1,
            "central_window_ns": r.model.central_window, "t2_ns": r.g1.t2, "beat_mhz": r.g1.beat_mhz,
            "dark_rate_per_ns": r.detectors[0].dark_rate,
            "budget_fractions": {k: v.fractions for k, v in r.budget.items()}}


def _g1(scn: Scenario, out: Path, args) -> dict:
    s = ex.run_g1(scn)
    write_g1_csv(s, out / "g1.csv", scn.digest)
    return {"t2_ns": s.t2, "t2_err_ns": s.t2_err, "beat_mhz": s.beat_mhz, "fft_bin_mhz": s.fft_bin_mhz,
            "configured_beat_mhz": scn.atom.beat_splitting_mhz, "fit_window_ns": s.fit_window}


HANDLERS = {"populations": _populations, "wavepacket": _wavepacket, "scan-rate": _scan,
            "trajectories": _trajectories, "correlate": _correlate, "hbt": _hbt, "hom": _hom, "g1": _g1}


def _stage(tmp: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(tmp.iterdir()):
        shutil.move(str(f), str(out / f.name))


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run one subcommand and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        print("ramansource: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        scn = parse_scenario(args.scenario) if args.scenario else None
    except (ScenarioError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if scn is not None and args.seed is not None:
        scn = scn.with_seed(args.seed)
    out = Path(args.out or (scn.outputs.directory if scn else "."))
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
    try:
        results = HANDLERS[args.command](scn, tmp, args)
        manifest = {
            "subcommand": args.command,
            "scenario": args.scenario,
            "digest": scn.digest if scn else results.get("digest_in", ""),
            "seed": scn.simulation.seed if scn else None,
            "n_sequences": scn.simulation.n_sequences if scn else None,
            "versions": _versions(),
            "wall_time_s": time.perf_counter() - t0,
            "results": {k: _num(v) for k, v in results.items()},
        }
        with open(tmp / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, default=_num)
            fh.write("\n")
        _stage(tmp, out)
        return EXIT_OK
    except (IntegrationError, FixedPointError, DegenerateSteadyState, FitError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ScenarioError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
