"""Acquisition chains: boxcar integrator, waveform digitizer, peak-and-hold.

Each chain maps the analog output of one shot to a raw value (a charge for
the integrating chains, an amplitude for peak-and-hold). A per-chain
calibration constant, the response to a single standard cell pulse, turns
raw values into integer photon counts.

Gate centers may be left as ``None``, meaning "on the pulse peak"; call
``resolve(kernel)`` to pin them before use.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import math

import numpy as np

from .errors import ConfigError
from .sipm import DEFAULT_WINDOW, EventBatch, EventList, PulseKernel, _sum_by_shot, waveform_batch
from .streams import as_generator

#: Phase grid used to calibrate a digitizer whose sampling phase is random.
N_CALIB_PHASES = 64


@dataclass(frozen=True)
class BoxcarConfig:
    gate_width: float
    gate_center: float | None = None

    kind = "boxcar"

    def __post_init__(self):
        if not self.gate_width > 0:
            raise ConfigError("boxcar gate_width must be positive")

    @property
    def label(self):
        return f"boxcar_{self.gate_width:g}"

    def resolve(self, kernel: PulseKernel):
        if self.gate_center is None:
            return replace(self, gate_center=kernel.t_peak)
        return self

    def gate(self):
        if self.gate_center is None:
            raise ConfigError("gate_center unresolved; call resolve(kernel)")
        return self.gate_center - self.gate_width / 2, self.gate_center + self.gate_width / 2


@dataclass(frozen=True)
class DigitizerConfig:
    """Waveform digitizer; the gated sum is formed off-line from the samples.

    ``sample_rate`` is in samples/s, ``full_scale`` in amplitude units.
    """

    gate_width: float
    gate_center: float | None = None
    sample_rate: float = 2.5e8
    bits: int = 12
    full_scale: float = 40.0
    phase_jitter: bool = True
    pedestal: float = 2.0

    kind = "digitizer"

    def __post_init__(self):
        if not self.gate_width > 0 or not self.sample_rate > 0 or not self.full_scale > 0:
            raise ConfigError("gate_width, sample_rate and full_scale must be positive")
        if self.bits < 1:
            raise ConfigError("bits must be >= 1")
        if not 0 <= self.pedestal < self.full_scale:
            raise ConfigError("pedestal must lie in [0, full_scale)")
        if self.gate_width * 1e-9 * self.sample_rate < 2:
            raise ConfigError(
                f"gate of {self.gate_width:g} ns holds fewer than 2 samples at {self.sample_rate:g} S/s")

    @property
    def label(self):
        return f"digitizer_{self.gate_width:g}"

    @property
    def period_ns(self):
        return 1e9 / self.sample_rate

    @property
    def max_code(self):
        return 2 ** self.bits - 1

    @property
    def lsb(self):
        return self.full_scale / self.max_code

    @property
    def pedestal_code(self):
        """Baseline offset rounded to whole codes."""
        return int(math.floor(self.pedestal / self.lsb + 0.5))

    def sampling_key(self):
        """Configs sharing this key can share one digitized record."""
        return (self.sample_rate, self.bits, self.full_scale, self.phase_jitter, self.pedestal)

    resolve = BoxcarConfig.resolve
    gate = BoxcarConfig.gate


@dataclass(frozen=True)
class PeakHoldConfig:
    """Peak-and-hold: maximum of the noisy waveform over a search window.

    Without an explicit ``window`` the search spans ``default_width`` ns
    centered on the pulse peak. ``search_step`` also sets how many
    independent noise values enter the maximum.
    """

    window: tuple | None = None
    search_step: float = 1.0

    kind = "peakhold"
    gate_width = None
    default_width = 10.0

    def __post_init__(self):
        if self.window is not None and not self.window[1] > self.window[0]:
            raise ConfigError("peak-hold window must have t_max > t_min")
        if not self.search_step > 0:
            raise ConfigError("search_step must be positive")

    @property
    def label(self):
        return "peakhold"

    def resolve(self, kernel):
        if self.window is None:
            half = self.default_width / 2
            return replace(self, window=(kernel.t_peak - half, kernel.t_peak + half))
        return self

    def grid(self):
        if self.window is None:
            raise ConfigError("peak-hold window unresolved; call resolve(kernel)")
        n = int(math.floor((self.window[1] - self.window[0]) / self.search_step + 1e-9)) + 1
        return self.window[0] + self.search_step * np.arange(n)


@dataclass(frozen=True)
class ChainOutput:
    raw: float
    chain_id: str


@dataclass(frozen=True)
class CalibConstant:
    q1: float

    def __post_init__(self):
        if not self.q1 > 0:
            raise ConfigError(f"calibration constant must be positive, got {self.q1!r}")


@dataclass
class DigitizedBatch:
    """Digitizer records of many shots: first sample times and integer codes."""

    t0: np.ndarray
    period_ns: float
    codes: np.ndarray
    n_clipped: np.ndarray

    def times(self):
        return self.t0[:, None] + self.period_ns * np.arange(self.codes.shape[1])

    def head(self, n):
        return DigitizedBatch(self.t0[:n], self.period_ns, self.codes[:n], self.n_clipped[:n])


@dataclass
class Trace:
    """Digitizer record of one shot."""

    t0: float
    period_ns: float
    codes: np.ndarray
    n_clipped: int = 0

    @property
    def times(self):
        return self.t0 + self.period_ns * np.arange(len(self.codes))


def _check_gate(a, b, window):
    if a < window[0] or b > window[1]:
        raise ConfigError(f"gate [{a:g}, {b:g}] ns outside shot window {tuple(window)}")


def _single(ev: EventList):
    return EventBatch.from_event_lists([ev])


# --------------------------------------------------------------------------
# batch chains

def boxcar_batch(batch: EventBatch, kernel: PulseKernel, cfg: BoxcarConfig, noise_sigma, rng):
    """Analytic gated charge per shot plus integrated baseline noise."""
    a, b = cfg.gate()
    _check_gate(a, b, batch.window)
    q = batch.weight * (kernel.antiderivative(b - batch.time) - kernel.antiderivative(a - batch.time))
    raw = np.bincount(batch.shot, weights=q, minlength=batch.n_shots)
    noise = rng.standard_normal(batch.n_shots)
    return raw + noise_sigma * math.sqrt(cfg.gate_width) * noise


def digitize_batch(batch: EventBatch, kernel: PulseKernel, cfg: DigitizerConfig, noise_sigma, rng,
                   phases=None) -> DigitizedBatch:
    """Sample, add per-sample noise and quantize the waveform of every shot.

    Samples start at ``window[0] + phase``; the phase is uniform over one
    sampling period per shot when ``phase_jitter`` is on (or taken from
    ``phases``), zero otherwise. The baseline sits at ``pedestal`` so that
    negative noise excursions are not clipped at code 0.
    """
    t_lo, t_hi = batch.window
    period = cfg.period_ns
    n_samples = int(math.floor((t_hi - t_lo) / period))
    if phases is None:
        phases = rng.uniform(0.0, period, size=batch.n_shots) if cfg.phase_jitter else np.zeros(batch.n_shots)
    t0 = t_lo + np.asarray(phases, dtype=float)
    t = t0[:, None] + period * np.arange(n_samples)
    v = waveform_batch(batch, kernel, t) + noise_sigma * rng.standard_normal(t.shape)
    codes = np.floor(v / cfg.lsb + 0.5) + cfg.pedestal_code
    clipped = (codes < 0) | (codes > cfg.max_code)
    codes = np.clip(codes, 0, cfg.max_code).astype(np.int32)
    return DigitizedBatch(t0, period, codes, clipped.sum(axis=1))


def gated_sum_batch(rec: DigitizedBatch, cfg: DigitizerConfig):
    a, b = cfg.gate()
    t = rec.times()
    inside = (t >= a) & (t < b)
    n_in = inside.sum(axis=1)
    if n_in.size and n_in.min() < 2:
        raise ConfigError(f"digitizer gate [{a:g}, {b:g}] ns holds fewer than 2 samples")
    net = (rec.codes * inside).sum(axis=1) - n_in * cfg.pedestal_code
    return net * (cfg.lsb * rec.period_ns)


def peak_hold_batch(batch: EventBatch, kernel: PulseKernel, cfg: PeakHoldConfig, noise_sigma, rng):
    """Maximum of waveform plus independent per-point noise over the search grid."""
    cfg = cfg.resolve(kernel)
    _check_gate(cfg.window[0], cfg.window[1], batch.window)
    grid = cfg.grid()
    v = waveform_batch(batch, kernel, grid) + noise_sigma * rng.standard_normal((batch.n_shots, len(grid)))
    return v.max(axis=1)


def photons_from_raw(raw, q1):
    """Vectorized ``max(0, round(raw / q1))`` with halves rounded up."""
    return np.maximum(0, np.floor(np.asarray(raw) / q1 + 0.5)).astype(np.int64)


# --------------------------------------------------------------------------
# single-shot interface

def boxcar_integrate(ev: EventList, kernel: PulseKernel, cfg: BoxcarConfig, noise_sigma=0.0,
                     rng=None) -> ChainOutput:
    cfg = cfg.resolve(kernel)
    raw = boxcar_batch(_single(ev), kernel, cfg, noise_sigma, as_generator(rng))[0]
    return ChainOutput(float(raw), "boxcar")


def digitize(ev: EventList, kernel: PulseKernel, cfg: DigitizerConfig, noise_sigma=0.0,
             rng=None, phase=None) -> Trace:
    phases = None if phase is None else [phase]
    rec = digitize_batch(_single(ev), kernel, cfg, noise_sigma, as_generator(rng), phases)
    return Trace(float(rec.t0[0]), rec.period_ns, rec.codes[0], int(rec.n_clipped[0]))


def gated_sum(samples: Trace, cfg: DigitizerConfig, kernel: PulseKernel | None = None) -> ChainOutput:
    cfg = cfg.resolve(kernel or PulseKernel())
    rec = DigitizedBatch(np.array([samples.t0]), samples.period_ns, np.asarray(samples.codes)[None, :],
                         np.array([samples.n_clipped]))
    return ChainOutput(float(gated_sum_batch(rec, cfg)[0]), "digitizer")


def peak_hold(ev: EventList, kernel: PulseKernel, cfg: PeakHoldConfig, noise_sigma=0.0,
              rng=None) -> ChainOutput:
    cfg = cfg.resolve(kernel)
    raw = peak_hold_batch(_single(ev), kernel, cfg, noise_sigma, as_generator(rng))[0]
    return ChainOutput(float(raw), "peakhold")


def calibrate_single_photon(cfg, kernel: PulseKernel, window=DEFAULT_WINDOW) -> CalibConstant:
    """Noise-free response of a chain to one standard cell pulse at t = 0.

    A digitizer with random sampling phase is calibrated on the mean
    response over a uniform grid of phases.
    """
    cfg = cfg.resolve(kernel)
    one = EventBatch(1, tuple(window), np.zeros(1, np.int64), np.zeros(1), np.ones(1), np.zeros(1, np.int8))
    rng = np.random.default_rng(0)  # zero noise: draws are discarded
    if cfg.kind == "boxcar":
        q1 = boxcar_batch(one, kernel, cfg, 0.0, rng)[0]
    elif cfg.kind == "peakhold":
        q1 = peak_hold_batch(one, kernel, cfg, 0.0, rng)[0]
    elif cfg.kind == "digitizer":
        if cfg.phase_jitter:
            phases = (np.arange(N_CALIB_PHASES) + 0.5) / N_CALIB_PHASES * cfg.period_ns
        else:
            phases = np.zeros(1)
        many = EventBatch(len(phases), tuple(window), np.arange(len(phases)), np.zeros(len(phases)),
                          np.ones(len(phases)), np.zeros(len(phases), np.int8))
        q1 = gated_sum_batch(digitize_batch(many, kernel, cfg, 0.0, rng, phases), cfg).mean()
    else:
        raise ConfigError(f"unknown chain kind {cfg.kind!r}")
    return CalibConstant(float(q1))


def charge_to_photons(out: ChainOutput, cal: CalibConstant) -> int:
    return int(photons_from_raw(out.raw, cal.q1))


def chain_raw_batch(cfg, batch: EventBatch, kernel: PulseKernel, noise_sigma, rng):
    """Raw output of any chain for a batch (digitizer: gated sum of a fresh record)."""
    if cfg.kind == "boxcar":
        return boxcar_batch(batch, kernel, cfg, noise_sigma, rng)
    if cfg.kind == "peakhold":
        return peak_hold_batch(batch, kernel, cfg, noise_sigma, rng)
    if cfg.kind == "digitizer":
        return gated_sum_batch(digitize_batch(batch, kernel, cfg, noise_sigma, rng), cfg)
    raise ConfigError(f"unknown chain kind {cfg.kind!r}")


def write_raw_csv(rows, path):
    """Dump ``(shot, chain, gate_ns, raw, m)`` tuples as CSV."""
    with open(path, "w", newline="") as fh:
        fh.write("shot,chain,gate_ns,raw,m\n")
        for shot, chain, gate, raw, m in rows:
            gate_s = "" if gate is None else f"{gate:g}"
            fh.write(f"{int(shot)},{chain},{gate_s},{float(raw)!r},{int(m)}\n")


def write_samples_csv(rec: DigitizedBatch, path, shot_offset=0, arm=None):
    """Dump digitizer records as ``shot,[arm,]sample,time_ns,code`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("shot,arm,sample,time_ns,code\n" if arm is not None else "shot,sample,time_ns,code\n")
        times = rec.times()
        prefix = "" if arm is None else f"{arm},"
        for i in range(rec.codes.shape[0]):
            for k in range(rec.codes.shape[1]):
                fh.write(f"{i + shot_offset},{prefix}{k},{float(times[i, k])!r},{int(rec.codes[i, k])}\n")
