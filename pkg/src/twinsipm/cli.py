"""Command-line front end.

    twinsipm scan CONFIG         R versus intensity for every chain
    twinsipm condition CONFIG    conditional statistics of one arm
    twinsipm analyze CSV         estimators applied to external shot,m1,m2 data
    twinsipm calibrate CONFIG    single-photon calibration constants

Outputs are written only once everything has been computed, so a failed run
leaves no partial files. Exit status: 0 success, 2 configuration error,
3 data error, 1 any other failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
from pathlib import Path
import sys

import numpy as np

from . import __version__
from . import config as cfgmod
from . import photonstats as ps
from .daq import calibrate_single_photon, write_raw_csv, write_samples_csv
from .errors import ConfigError, DataError, InsufficientStatisticsError, TwinSipmError
from .experiment import (
    analyze_counts,
    best_chain,
    chain_estimates,
    condition_on,
    estimate_theory,
    run_scan,
    simulate_shots,
)
from .sipm import write_events_csv
from .streams import stream, tag

log = logging.getLogger("twinsipm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

SCAN_COLUMNS = ("chain_id", "gate_ns", "mean_photons", "mean_m1", "mean_m2", "R", "R_err", "R_theory",
                "mu_hat", "eta_hat", "flag")
COND_COLUMNS = ("m_cond", "n_selected", "mean", "fano", "fano_err", "theory_mean", "theory_fano", "fidelity",
                "flag")


# --------------------------------------------------------------------------
# formatting

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def csv_text(columns, rows) -> str:
    lines = [",".join(columns)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _write_all(out_dir: Path, files: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)
        log.info("wrote %s", out_dir / name)


# --------------------------------------------------------------------------
# commands

def _load(args):
    run = cfgmod.load(args.config)
    return cfgmod.with_overrides(run, seed=args.seed, n_shots=args.shots, output_dir=args.out_dir,
                                 workers=args.workers)


def cmd_scan(args) -> int:
    run = _load(args)
    exp = run.experiment
    tables = []
    rows = run_scan(exp, tables=tables)
    for r in rows:
        if r.flag:
            log.warning("%s at %g photons flagged: %s", r.chain_id, r.mean_photons, r.flag)
    files = {
        "scan.csv": csv_text(SCAN_COLUMNS, [[getattr(r, c) for c in SCAN_COLUMNS] for r in rows]),
        "scan_summary.json": dump_json({
            "config": run.resolved(),
            "seed": exp.master_seed,
            "best_chain": best_chain(exp.chains),
            "eta_hat": rows[0].eta_hat if rows else None,
            "chains": chain_estimates(rows),
            "q1": tables[0].q1 if tables else {},
        }),
    }
    out_dir = Path(run.output_dir)
    if args.dump_shots:
        _dump_debug(exp, args.dump_shots, out_dir)
    _write_all(out_dir, files)
    return EXIT_OK


def _dump_debug(exp, n, out_dir: Path):
    """Events, raw chain outputs and digitizer samples of the first shots of scan point 0."""
    table = simulate_shots(exp, exp.scan[0], point_index=0, keep_events=n)
    n = min(n, table.n_shots)
    out_dir.mkdir(parents=True, exist_ok=True)
    for arm in (0, 1):
        write_events_csv(table.kept["events"][arm], out_dir / f"events_arm{arm + 1}.csv")
        rows = [(s, c.label, c.gate_width, table.raw[i, s, arm], table.m[i, s, arm])
                for s in range(n) for i, c in enumerate(exp.chains)]
        write_raw_csv(rows, out_dir / f"raw_arm{arm + 1}.csv")
        for label, recs in table.kept["records"].items():
            write_samples_csv(recs[arm], out_dir / f"samples_{label}_arm{arm + 1}.csv")


def _conditioning_arms(run):
    c = run.conditioning.conditioning_arm - 1
    return c, 1 - c


def cmd_condition(args) -> int:
    run = _load(args)
    exp, cs = run.experiment, run.conditioning
    m_values = tuple(args.mcond) if args.mcond else cs.m_cond
    if any(k < 0 for k in m_values):
        raise ConfigError("--mcond values must be >= 0")
    chain = cs.chain or best_chain(exp.chains)
    c_arm, a_arm = _conditioning_arms(run)
    mean = exp.scan[cs.scan_index]
    table = simulate_shots(exp, mean, point_index=cs.scan_index)
    counts = table.counts(chain)

    theory, theory_flag = cs.theory, ""
    if theory is None:
        try:
            theory = estimate_theory(counts, c_arm, a_arm, exp.n_bootstrap,
                                     stream(exp.master_seed, cs.scan_index, tag("condition:theory")))
        except TwinSipmError as exc:
            theory_flag = f"theory_unavailable: {exc}"
            log.warning("conditional theory unavailable: %s", exc)

    rows, files = [], {}
    for k in m_values:
        rng = stream(exp.master_seed, cs.scan_index, tag("condition"), k)
        try:
            res = condition_on(counts, k, None, c_arm, a_arm, theory=theory, n_bootstrap=exp.n_bootstrap,
                               rng=rng, estimate=False)
        except InsufficientStatisticsError as exc:
            log.warning("m_cond=%d: %s", k, exc)
            rows.append([k, exc.n_selected, None, None, None, None, None, None, "insufficient_statistics"])
            continue
        flag = res.flag or theory_flag
        rows.append([k, res.n_selected, res.mean, res.fano, res.fano_err, res.theory_mean, res.theory_fano,
                     res.fidelity, flag])
        theory_p = res.theory_pmf if res.theory_pmf is not None else np.zeros(0)
        size = max(len(res.histogram), len(theory_p))
        pnd = [[m, res.histogram[m] if m < len(res.histogram) else 0.0,
                theory_p[m] if m < len(theory_p) else (None if res.theory_pmf is None else 0.0)]
               for m in range(size)]
        files[f"pnd_{k}.csv"] = csv_text(("m", "empirical_p", "theory_p"), pnd)
    files["conditional.csv"] = csv_text(COND_COLUMNS, rows)

    pair = counts[:, [c_arm, a_arm]]
    files["conditional_summary.json"] = dump_json({
        "config": run.resolved(),
        "seed": exp.master_seed,
        "chain": chain,
        "mean_photons": mean,
        "q1": table.q1,
        "theory": None if theory is None else {"mean_m2": theory.mean_m2, "modes": theory.modes,
                                               "eta": theory.eta},
        "analysis": analyze_counts(pair, run.analysis.seed, run.analysis.n_bootstrap, run.analysis.min_count),
    })
    if args.export_shots:
        files["shots.csv"] = csv_text(("shot", "m1", "m2"),
                                      [[s, a, b] for s, (a, b) in zip(table.shot_index, pair)])
    _write_all(Path(run.output_dir), files)
    return EXIT_OK


def read_shot_file(path):
    """Parse a ``shot,m1,m2`` CSV into an ``(n, 2)`` count array."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    counts, seen = [], set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["shot", "m1", "m2"]:
            raise DataError(f"{path}:1: expected header 'shot,m1,m2', got {','.join(header or [])!r}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            try:
                shot, m1, m2 = (int(c.strip()) for c in row)
            except ValueError:
                raise DataError(f"{path}:{line}: non-integer field in {','.join(row)!r}") from None
            if m1 < 0 or m2 < 0:
                raise DataError(f"{path}:{line}: counts must be >= 0")
            if shot in seen:
                raise DataError(f"{path}:{line}: duplicate shot id {shot}")
            seen.add(shot)
            counts.append((m1, m2))
    if not counts:
        raise DataError(f"{path}: no data rows")
    return np.array(counts, dtype=np.int64)


def cmd_analyze(args) -> int:
    counts = read_shot_file(args.csv)
    if args.bootstrap < 50:
        raise ConfigError("--bootstrap must be >= 50")
    if args.min_count < 2:
        raise ConfigError("--min-count must be >= 2")
    settings = {"input": str(args.csv), "seed": args.seed, "n_bootstrap": args.bootstrap,
                "min_count": args.min_count}
    result = analyze_counts(counts, args.seed, args.bootstrap, args.min_count)
    for flag in result["flags"]:
        log.warning("%s", flag)
    out_dir = Path(args.out_dir or ".")
    _write_all(out_dir, {"analysis.json": dump_json({"config": settings, "seed": args.seed,
                                                     "analysis": result})})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    run = _load(args)
    exp = run.experiment
    chains = {}
    for chain, resolved in zip(exp.chains, exp.resolved_chains()):
        entry = {"kind": chain.kind, "gate_width": chain.gate_width,
                 "q1": calibrate_single_photon(chain, exp.kernel, exp.window).q1}
        if chain.kind == "peakhold":
            entry["window"] = list(resolved.window)
        else:
            entry["gate_center"] = resolved.gate_center
        chains[chain.label] = entry
    doc = {
        "config": run.resolved(),
        "seed": exp.master_seed,
        "kernel": {"t_peak": exp.kernel.t_peak, "charge_q1": exp.kernel.charge,
                   "amplitude": exp.kernel.amplitude},
        "chains": chains,
    }
    _write_all(Path(run.output_dir), {"calibration.json": dump_json(doc)})
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point

def build_parser():
    p = argparse.ArgumentParser(prog="twinsipm", description="Virtual twin-beam experiments with SiPM readout.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--shots", type=int, help="override shots per scan point")
        sp.add_argument("--out-dir", help="override the output directory")
        sp.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
        return sp

    sp = with_config("scan", "R versus intensity for every chain")
    sp.add_argument("--dump-shots", type=int, default=0, metavar="N",
                    help="also dump events, raw outputs and digitizer samples of the first N shots")
    sp.set_defaults(func=cmd_scan)

    sp = with_config("condition", "conditional statistics of the analysis arm")
    sp.add_argument("--mcond", type=int, action="append", metavar="K", help="conditioning value (repeatable)")
    sp.add_argument("--export-shots", action="store_true", help="also write shots.csv (shot,m1,m2)")
    sp.set_defaults(func=cmd_condition)

    sp = sub.add_parser("analyze", help="estimators on an external shot,m1,m2 CSV file")
    sp.add_argument("csv")
    sp.add_argument("--seed", type=int, default=0, help="bootstrap seed (default 0)")
    sp.add_argument("--bootstrap", type=int, default=ps.N_BOOTSTRAP, help="bootstrap resamples")
    sp.add_argument("--min-count", type=int, default=2, help="minimum shots per conditional row")
    sp.add_argument("--out-dir", help="output directory (default: current)")
    sp.set_defaults(func=cmd_analyze)

    sp = with_config("calibrate", "single-photon calibration constants")
    sp.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TwinSipmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
