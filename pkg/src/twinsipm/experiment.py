"""Virtual twin-beam experiments: intensity scans and conditioning runs.

Shots are simulated in fixed-size blocks. Each block draws from streams keyed
by ``(master_seed, scan point, block, purpose)``, so a run is reproducible
bit for bit whatever the number of worker processes.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from . import photonstats as ps
from .daq import (
    BoxcarConfig,
    DigitizerConfig,
    PeakHoldConfig,
    calibrate_single_photon,
    chain_raw_batch,
    digitize_batch,
    gated_sum_batch,
    photons_from_raw,
)
from .errors import ConfigError, DomainError, EstimationError, InsufficientStatisticsError, UndefinedEstimateError
from .photonstats import bootstrap  # noqa: F401  re-exported for callers of this module
from .sipm import DEFAULT_WINDOW, EventBatch, PulseKernel, SiPMConfig, simulate_events
from .streams import stream, tag

log = logging.getLogger(__name__)

#: Shots per random-stream block. Part of the reproducibility contract.
BLOCK_SIZE = 4096

DEFAULT_CHAINS = (
    DigitizerConfig(350.0),
    DigitizerConfig(100.0),
    DigitizerConfig(50.0),
    BoxcarConfig(50.0),
    BoxcarConfig(10.0),
    PeakHoldConfig(),
)
# detected mean per arm from 0.5 to 6 at the default PDE
DEFAULT_SCAN = tuple(round(m / SiPMConfig().pde, 6) for m in np.linspace(0.5, 6.0, 8))


@dataclass(frozen=True)
class ExperimentConfig:
    scan: tuple = DEFAULT_SCAN
    modes: float = 100.0
    detectors: tuple = (SiPMConfig(), SiPMConfig())
    kernel: PulseKernel = PulseKernel()
    chains: tuple = DEFAULT_CHAINS
    n_shots: int = 100_000
    master_seed: int = 20191021
    window: tuple = DEFAULT_WINDOW
    n_bootstrap: int = ps.N_BOOTSTRAP
    workers: int = 1

    def __post_init__(self):
        if self.n_shots < 100:
            raise ConfigError("n_shots must be >= 100")
        if not len(self.scan):
            raise ConfigError("scan must contain at least one intensity")
        if len(self.detectors) != 2:
            raise ConfigError("exactly two detectors (one per arm) are required")
        if not self.chains:
            raise ConfigError("at least one acquisition chain is required")
        labels = [c.label for c in self.chains]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate chain labels in {labels}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for mean in self.scan:
            ps.TwbSourceParams(mean, self.modes)

    @property
    def labels(self):
        return tuple(c.label for c in self.chains)

    def resolved_chains(self):
        return tuple(c.resolve(self.kernel) for c in self.chains)


@dataclass
class ShotTable:
    """Calibrated counts per chain, shot and arm for one source intensity."""

    labels: tuple
    m: np.ndarray            # (n_chains, n_shots, 2) calibrated photon counts
    raw: np.ndarray          # (n_chains, n_shots, 2) raw chain outputs
    photons: np.ndarray      # (n_shots,) generated photons per arm
    fired: np.ndarray        # (n_shots, 2) photon-fired cells
    shot_index: np.ndarray   # (n_shots,) global shot index; block = index // BLOCK_SIZE
    mean_photons: float = 0.0
    point_index: int = 0
    q1: dict = field(default_factory=dict)
    kept: dict = field(default_factory=dict)  # events and digitizer records of the first shots

    @property
    def n_shots(self):
        return len(self.shot_index)

    def counts(self, label=None):
        i = 0 if label is None else self.labels.index(label)
        return self.m[i]


@dataclass
class ScanRow:
    chain_id: str
    gate_ns: float | None
    mean_photons: float
    mean_m1: float
    mean_m2: float
    R: float
    R_err: float
    R_theory: float = math.nan
    mu_hat: float = math.nan
    eta_hat: float = math.nan
    flag: str = ""


@dataclass
class ConditionalResult:
    m_cond: int
    n_selected: int
    mean: float = math.nan
    fano: float = math.nan
    fano_err: float = math.nan
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theory_pmf: np.ndarray | None = None
    theory_fano: float = math.nan
    theory_mean: float = math.nan
    fidelity: float = math.nan
    flag: str = ""


@dataclass(frozen=True)
class ConditionalTheory:
    """Inputs of the conditional-state theory: arm-2 mean, modes, efficiency."""

    mean_m2: float
    modes: float
    eta: float


# --------------------------------------------------------------------------
# shot simulation

def _block_streams(seed, point, block):
    return lambda name: stream(seed, point, block, tag(name))


def _simulate_block(cfg: ExperimentConfig, chains, q1, mean_photons, point, block, size, keep_events):
    rng = _block_streams(cfg.master_seed, point, block)
    source = ps.TwbSourceParams(mean_photons, cfg.modes)
    photons = ps.sample_multithermal(source, rng("source"), size=size)

    batches, fired = [], []
    for arm, det in enumerate(cfg.detectors):
        batch, f = simulate_events(photons, det, cfg.kernel, cfg.window, rng(f"arm{arm}"))
        batches.append(batch)
        fired.append(f)

    raw = np.empty((len(chains), size, 2))
    digitizer_groups = {}
    for i, chain in enumerate(chains):
        if chain.kind == "digitizer":
            digitizer_groups.setdefault(chain.sampling_key(), []).append(i)
            continue
        r = rng(f"chain:{chain.label}")
        for arm, det in enumerate(cfg.detectors):
            raw[i, :, arm] = chain_raw_batch(chain, batches[arm], cfg.kernel, det.baseline_noise_sigma, r)
    records = {}
    for key, idx in digitizer_groups.items():
        # one record per shot and arm, integrated off-line over every gate;
        # each record draws its own sampling phase
        first = chains[idx[0]]
        r = rng(f"digitizer:{key!r}")
        for arm, det in enumerate(cfg.detectors):
            rec = digitize_batch(batches[arm], cfg.kernel, first, det.baseline_noise_sigma, r)
            for i in idx:
                raw[i, :, arm] = gated_sum_batch(rec, chains[i])
            if keep_events > 0:
                records.setdefault(first.label, []).append(rec.head(keep_events))

    m = np.empty(raw.shape, dtype=np.int64)
    for i, chain in enumerate(chains):
        m[i] = photons_from_raw(raw[i], q1[chain.label])
    kept = {}
    if keep_events > 0:
        kept["events"] = []
        for batch in batches:
            sel = batch.shot < keep_events
            kept["events"].append(EventBatch(min(keep_events, size), batch.window, batch.shot[sel],
                                             batch.time[sel], batch.weight[sel], batch.origin[sel]))
        kept["records"] = records
    return m, raw, photons, np.column_stack(fired), kept


def _run_block(args):
    return _simulate_block(*args)


def calibrations(cfg: ExperimentConfig):
    return {c.label: calibrate_single_photon(c, cfg.kernel, cfg.window).q1 for c in cfg.resolved_chains()}


def simulate_shots(cfg: ExperimentConfig, mean_photons, point_index=0, n_shots=None, workers=None,
                   keep_events=0) -> ShotTable:
    """Simulate ``n_shots`` shots at one source intensity through every chain."""
    n_shots = cfg.n_shots if n_shots is None else n_shots
    workers = cfg.workers if workers is None else workers
    chains = cfg.resolved_chains()
    q1 = calibrations(cfg)
    n_blocks = -(-n_shots // BLOCK_SIZE)
    jobs = [
        (cfg, chains, q1, mean_photons, point_index, b, min(BLOCK_SIZE, n_shots - b * BLOCK_SIZE),
         keep_events if b == 0 else 0)
        for b in range(n_blocks)
    ]
    if workers > 1 and n_blocks > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(j) for j in jobs]
    return ShotTable(
        labels=cfg.labels,
        m=np.concatenate([p[0] for p in parts], axis=1),
        raw=np.concatenate([p[1] for p in parts], axis=1),
        photons=np.concatenate([p[2] for p in parts]),
        fired=np.concatenate([p[3] for p in parts]),
        shot_index=np.arange(n_shots, dtype=np.int64),
        mean_photons=float(mean_photons),
        point_index=point_index,
        q1=q1,
        kept=parts[0][4],
    )


# --------------------------------------------------------------------------
# scans

def best_chain(chains):
    """Shortest-gate boxcar, the reference chain for the efficiency estimate."""
    boxcars = [c for c in chains if c.kind == "boxcar"]
    if not boxcars:
        return chains[0].label
    return min(boxcars, key=lambda c: c.gate_width).label


def pooled_eta(rows):
    """Efficiency ``1 - R`` from the inverse-variance weighted mean of valid rows."""
    valid = [r for r in rows if math.isfinite(r.R) and r.R_err > 0]
    if not valid:
        raise UndefinedEstimateError("no valid NRF values to estimate the efficiency from")
    w = np.array([1.0 / r.R_err ** 2 for r in valid])
    r_mean = float(np.dot(w, [r.R for r in valid]) / w.sum())
    return ps.estimate_eta_from_nrf(r_mean)


def scan_point_rows(cfg: ExperimentConfig, table: ShotTable):
    """NRF rows (without theory overlay) for every chain of one shot table."""
    rows = []
    for chain in cfg.chains:
        counts = table.counts(chain.label)
        mean_m1, mean_m2 = (float(x) for x in counts.mean(axis=0))
        row = ScanRow(chain.label, chain.gate_width, table.mean_photons, mean_m1, mean_m2, math.nan, math.nan)
        rng = stream(cfg.master_seed, table.point_index, tag(f"bootstrap:{chain.label}"))
        try:
            est = ps.empirical_nrf(counts, cfg.n_bootstrap, rng)
            row.R, row.R_err = est.value, est.std_error
        except UndefinedEstimateError as exc:
            row.flag = "nrf_undefined"
            log.warning("%s at %g photons: %s", chain.label, table.mean_photons, exc)
        try:
            row.mu_hat = ps.estimate_modes(ps.fano_factor(counts[:, 1]))
        except EstimationError:
            row.flag = row.flag or "modes_unestimable"
        rows.append(row)
    return rows


def attach_theory(rows, eta_hat):
    for row in rows:
        row.eta_hat = eta_hat
        if row.flag or not math.isfinite(eta_hat):
            continue
        try:
            row.R_theory = ps.theoretical_nrf(eta_hat, eta_hat, row.mean_m1, row.mean_m2,
                                              row.mu_hat, row.mu_hat)
        except DomainError:
            row.flag = "theory_undefined"


def run_scan(cfg: ExperimentConfig, tables=None):
    """R versus intensity for every chain, with the closed-form overlay.

    The overlay uses the measured arm means, the mode number estimated from
    arm-2 moments, and a single efficiency ``1 - R`` pooled over the scan
    from the best chain. Rows are grouped by chain, sorted by ``mean_m1``.
    If ``tables`` is a list, the simulated shot tables are appended to it.
    """
    rows = []
    for i, mean in enumerate(cfg.scan):
        table = simulate_shots(cfg, mean, point_index=i)
        rows.extend(scan_point_rows(cfg, table))
        if tables is not None:
            tables.append(table)
    best = best_chain(cfg.chains)
    try:
        eta_hat = pooled_eta([r for r in rows if r.chain_id == best])
    except (UndefinedEstimateError, DomainError) as exc:
        log.warning("efficiency estimate unavailable: %s", exc)
        eta_hat = math.nan
    attach_theory(rows, eta_hat)
    order = {label: k for k, label in enumerate(cfg.labels)}
    rows.sort(key=lambda r: (order[r.chain_id], r.mean_m1))
    return rows


def chain_estimates(rows):
    """Per-chain pooled efficiency and mean mode-number estimates."""
    out = {}
    for label in dict.fromkeys(r.chain_id for r in rows):
        mine = [r for r in rows if r.chain_id == label]
        try:
            eta = pooled_eta(mine)
        except (UndefinedEstimateError, DomainError):
            eta = math.nan
        mus = [r.mu_hat for r in mine if math.isfinite(r.mu_hat)]
        out[label] = {"eta_hat": eta, "mu_hat": float(np.mean(mus)) if mus else math.nan}
    return out


# --------------------------------------------------------------------------
# conditioning

def reconstruct_statistics(sample, theory=None):
    """Normalized histogram of ``sample`` and its fidelity to ``theory``.

    Fidelity is ``(sum_m sqrt(p_m q_m))**2``; NaN without a theory pmf.
    """
    sample = np.asarray(sample, dtype=np.int64)
    if sample.size == 0:
        raise DomainError("empty sample")
    size = int(sample.max()) + 1
    if theory is not None:
        size = max(size, len(theory))
    hist = np.bincount(sample, minlength=size) / sample.size
    if theory is None:
        return hist, math.nan
    q = np.zeros(size)
    q[: len(theory)] = theory
    return hist, float(np.sum(np.sqrt(hist * q)) ** 2)


def estimate_theory(counts, conditioning_arm=0, analysis_arm=1, n_bootstrap=ps.N_BOOTSTRAP, rng=None):
    """Conditional-theory inputs estimated from data.

    Mean and modes come from the analysis arm, the efficiency from ``1 - R``.
    Raises the estimator's error when either cannot be formed.
    """
    summary = ps.fano_factor(counts[:, analysis_arm])
    modes = ps.estimate_modes(summary)
    r = ps.empirical_nrf(counts[:, [conditioning_arm, analysis_arm]], n_bootstrap, rng).value
    return ConditionalTheory(summary.mean, modes, ps.estimate_eta_from_nrf(r))


def condition_on(table, m_cond, chain=None, conditioning_arm=0, analysis_arm=1, theory=None,
                 n_bootstrap=ps.N_BOOTSTRAP, rng=None, min_selected=2, estimate=True) -> ConditionalResult:
    """Statistics of the analysis arm on shots where the other arm counted ``m_cond``.

    ``table`` is a :class:`ShotTable` or an ``(n_shots, 2)`` count array.
    Without an explicit ``theory`` its inputs are estimated from the data
    (unless ``estimate`` is false); if that fails the theory fields stay NaN
    and ``flag`` says why.
    """
    counts = table.counts(chain) if isinstance(table, ShotTable) else np.asarray(table)
    sel = counts[:, conditioning_arm] == m_cond
    n_sel = int(sel.sum())
    if n_sel < max(2, min_selected):
        raise InsufficientStatisticsError(f"only {n_sel} shots with m={m_cond} on the conditioning arm", n_sel)
    sample = counts[sel, analysis_arm]
    summary = ps.fano_factor(sample)
    result = ConditionalResult(m_cond, n_sel, summary.mean, summary.fano)
    if summary.fano_defined:
        result.fano_err = ps.fano_std_error(sample, n_bootstrap, rng)
    if theory is None and estimate:
        try:
            theory = estimate_theory(counts, conditioning_arm, analysis_arm, n_bootstrap, rng)
        except (EstimationError, DomainError, UndefinedEstimateError) as exc:
            result.flag = f"theory_unavailable: {exc}"
    pmf = None
    if theory is not None and theory.eta > 0:
        try:
            source = ps.TwbSourceParams(theory.mean_m2 / theory.eta, theory.modes)
            pmf = ps.conditional_pmf_exact(source, ps.DetectionParams(theory.eta, theory.eta), m_cond)
            result.theory_mean = ps.pmf_moments(pmf)[0]
            result.theory_fano = ps.conditional_fano_theory(
                ps.ConditionalTheoryParams(m_cond, theory.mean_m2, theory.modes, theory.eta))
        except (DomainError, UndefinedEstimateError) as exc:
            result.flag = f"theory_unavailable: {exc}"
    elif theory is not None:
        result.flag = "theory_unavailable: zero efficiency"
    result.histogram, result.fidelity = reconstruct_statistics(sample, pmf)
    result.theory_pmf = pmf
    return result


# --------------------------------------------------------------------------
# analysis of (m1, m2) count pairs

def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def analyze_counts(counts, seed=0, n_bootstrap=ps.N_BOOTSTRAP, min_count=2):
    """Estimator summary of paired counts as a JSON-ready dict.

    Used for external data files and for the simulator's own summary, so the
    two agree exactly on identical counts.
    """
    counts = np.asarray(counts, dtype=np.int64)
    out = {"n_shots": int(len(counts)), "flags": []}
    try:
        est = ps.empirical_nrf(counts, n_bootstrap, stream(seed, tag("analysis:nrf")))
        out["nrf"] = {"value": _num(est.value), "std_error": _num(est.std_error)}
    except (UndefinedEstimateError, DomainError) as exc:
        out["nrf"] = {"value": None, "std_error": None}
        out["flags"].append(f"nrf: {exc}")
        est = None

    arms = []
    for arm in (0, 1):
        s = ps.fano_factor(counts[:, arm])
        entry = {"arm": arm + 1, "mean": _num(s.mean), "variance": _num(s.variance),
                 "fano": _num(s.fano), "modes_hat": None}
        try:
            entry["modes_hat"] = _num(ps.estimate_modes(s))
        except EstimationError as exc:
            out["flags"].append(f"modes_hat arm {arm + 1}: {exc}")
        arms.append(entry)
    out["arms"] = arms
    out["modes_hat"] = arms[1]["modes_hat"]

    eta = None
    if est is not None:
        try:
            eta = ps.estimate_eta_from_nrf(est.value)
        except DomainError as exc:
            out["flags"].append(f"eta_hat: {exc}")
    out["eta_hat"] = _num(eta) if eta is not None else None

    theory = None
    if eta is not None and eta > 0 and out["modes_hat"] is not None:
        theory = ConditionalTheory(arms[1]["mean"], out["modes_hat"], eta)
    degenerate = counts[:, 0].min() == counts[:, 0].max()
    rows = []
    values, freq = np.unique(counts[:, 0], return_counts=True)
    for k, n in zip(values, freq):
        if n < max(2, min_count):
            continue
        res = condition_on(counts, int(k), theory=theory, estimate=False, n_bootstrap=n_bootstrap,
                           rng=stream(seed, tag("analysis:cond"), int(k)))
        flag = "" if theory else "theory_unavailable"
        if degenerate:
            flag = "degenerate_conditioning_arm"
        rows.append({"m_cond": int(k), "n_selected": res.n_selected, "mean": _num(res.mean),
                     "fano": _num(res.fano), "fano_err": _num(res.fano_err),
                     "theory_fano": _num(res.theory_fano), "flag": flag})
    out["conditional"] = rows
    return out
