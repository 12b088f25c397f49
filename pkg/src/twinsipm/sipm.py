"""SiPM response: cell firings, spurious events and the analog waveform.

A shot on one detector is a list of cell events (time, weight, origin).
Photon events sit at t = 0, the light-pulse trigger. Dark counts are uniform
over the shot window. Cross-talk and afterpulses are branching offspring of
existing events and may be delayed.

Every physics routine works on an :class:`EventBatch` covering many shots at
once; the single-shot functions are thin wrappers over the batch code.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
import math

import numpy as np

from .errors import CascadeOverflowError, DomainError
from .streams import as_generator

DEFAULT_WINDOW = (-100.0, 500.0)
#: Hard cap on events per shot; exceeding it signals a runaway cascade.
MAX_EVENTS_PER_SHOT = 10**6


class Origin(IntEnum):
    PHOTON = 0
    DARK = 1
    CROSSTALK = 2
    AFTERPULSE = 3


@dataclass(frozen=True)
class SiPMConfig:
    """Per-detector microphysics.

    Rates are in events/s, times in ns, noise in waveform amplitude units.
    Cross-talk and afterpulse probabilities are mean offspring per event and
    must stay below one so that cascades terminate.
    """

    n_cells: int = 667
    pde: float = 0.4
    dark_rate: float = 1e5
    p_crosstalk: float = 0.03
    f_delayed_ct: float = 0.5
    tau_delayed_ct: float = 30.0
    p_afterpulse: float = 0.01
    tau_afterpulse: float = 50.0
    baseline_noise_sigma: float = 0.2
    afterpulse_recovery: bool = True

    def __post_init__(self):
        if self.n_cells < 1:
            raise DomainError("n_cells must be >= 1")
        for name in ("pde", "f_delayed_ct"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")
        for name in ("p_crosstalk", "p_afterpulse"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise DomainError(f"{name} must lie in [0, 1) for a finite cascade")
        for name in ("tau_delayed_ct", "tau_afterpulse"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.dark_rate < 0 or self.baseline_noise_sigma < 0:
            raise DomainError("dark_rate and baseline_noise_sigma must be >= 0")

    @classmethod
    def ideal(cls, pde=1.0, n_cells=10**9):
        """Detector with no spurious events, no noise and negligible saturation."""
        return cls(n_cells=n_cells, pde=pde, dark_rate=0.0, p_crosstalk=0.0,
                   p_afterpulse=0.0, baseline_noise_sigma=0.0)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class PulseKernel:
    """Double-exponential single-cell pulse, normalized to a peak of ``amplitude``."""

    rise_tau: float = 1.0
    decay_tau: float = 15.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not 0 < self.rise_tau < self.decay_tau:
            raise DomainError("need 0 < rise_tau < decay_tau")
        if not self.amplitude > 0:
            raise DomainError("amplitude must be positive")

    @property
    def t_peak(self) -> float:
        r, d = self.rise_tau, self.decay_tau
        return math.log(d / r) * r * d / (d - r)

    @property
    def _norm(self) -> float:
        tp = self.t_peak
        return math.exp(-tp / self.decay_tau) - math.exp(-tp / self.rise_tau)

    @property
    def charge(self) -> float:
        """Time integral of one standard pulse."""
        return self.amplitude * (self.decay_tau - self.rise_tau) / self._norm

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tp = np.maximum(t, 0.0)
        v = np.exp(-tp / self.decay_tau) - np.exp(-tp / self.rise_tau)
        return np.where(t >= 0, v * (self.amplitude / self._norm), 0.0)

    def antiderivative(self, t):
        """Integral of the kernel from 0 (or -inf) to ``t``."""
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        d, r = self.decay_tau, self.rise_tau
        v = d * -np.expm1(-t / d) - r * -np.expm1(-t / r)
        return v * (self.amplitude / self._norm)


@dataclass(frozen=True)
class CellEvent:
    time: float
    weight: float = 1.0
    origin: Origin = Origin.PHOTON


@dataclass(frozen=True)
class EventList:
    events: tuple = ()
    window: tuple = DEFAULT_WINDOW

    def __len__(self):
        return len(self.events)

    @property
    def times(self):
        return np.array([e.time for e in self.events], dtype=float)

    @property
    def weights(self):
        return np.array([e.weight for e in self.events], dtype=float)


@dataclass
class EventBatch:
    """Events of ``n_shots`` shots on one detector, stored as flat arrays.

    Arrays are sorted by ``(shot, time)`` once :meth:`sort` has run;
    :func:`simulate_events` always returns a sorted batch.
    """

    n_shots: int
    window: tuple = DEFAULT_WINDOW
    shot: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    time: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def __len__(self):
        return len(self.shot)

    @classmethod
    def from_event_lists(cls, lists):
        lists = list(lists)
        window = lists[0].window if lists else DEFAULT_WINDOW
        shot = np.concatenate([np.full(len(ev), i, np.int64) for i, ev in enumerate(lists)] or [np.zeros(0, np.int64)])
        return cls(
            len(lists), window, shot,
            np.array([e.time for ev in lists for e in ev.events], dtype=float),
            np.array([e.weight for ev in lists for e in ev.events], dtype=float),
            np.array([int(e.origin) for ev in lists for e in ev.events], dtype=np.int8),
        )

    def extend(self, shot, time, weight, origin):
        self.shot = np.concatenate([self.shot, shot])
        self.time = np.concatenate([self.time, time])
        self.weight = np.concatenate([self.weight, weight])
        self.origin = np.concatenate([self.origin, np.broadcast_to(np.int8(origin), np.shape(shot))])

    def sort(self):
        order = np.lexsort((self.time, self.shot))
        self.shot, self.time = self.shot[order], self.time[order]
        self.weight, self.origin = self.weight[order], self.origin[order]
        return self

    def event_list(self, i) -> EventList:
        sel = self.shot == i
        return EventList(tuple(
            CellEvent(float(t), float(w), Origin(int(o)))
            for t, w, o in zip(self.time[sel], self.weight[sel], self.origin[sel])
        ), self.window)

    def counts(self, origin=None):
        """Number of events per shot, optionally restricted to one origin."""
        shot = self.shot if origin is None else self.shot[self.origin == origin]
        return np.bincount(shot, minlength=self.n_shots)


# --------------------------------------------------------------------------
# batch physics

def fired_cells(n_photons, cfg: SiPMConfig, rng):
    """Fired-cell count per shot: binomial detection, then cell occupancy."""
    n_photons = np.asarray(n_photons, dtype=np.int64)
    k = rng.binomial(n_photons, cfg.pde)
    total = int(k.sum())
    if total == 0:
        return k
    shots = np.repeat(np.arange(len(k), dtype=np.int64), k)
    cells = rng.integers(0, cfg.n_cells, size=total, dtype=np.int64)
    distinct = np.unique(shots * cfg.n_cells + cells) // cfg.n_cells
    return np.bincount(distinct, minlength=len(k))


def dark_events(n_shots, window, dark_rate, rng):
    """Dark counts: Poisson number per shot at uniform times (rate in 1/s)."""
    t0, t1 = window
    counts = rng.poisson(dark_rate * (t1 - t0) * 1e-9, size=n_shots)
    shot = np.repeat(np.arange(n_shots, dtype=np.int64), counts)
    return shot, rng.uniform(t0, t1, size=len(shot))


def _check_cap(per_shot):
    if per_shot.size and per_shot.max() > MAX_EVENTS_PER_SHOT:
        raise CascadeOverflowError(
            f"shot {int(per_shot.argmax())} exceeded {MAX_EVENTS_PER_SHOT} events")


def crosstalk_events(shot, time, n_shots, cfg: SiPMConfig, window, rng):
    """Cross-talk cascade offspring of the given events.

    Each event, including every offspring, triggers a Poisson number of
    neighbours with mean ``p_crosstalk``, so the cascade started by one
    ancestor has a Borel-distributed size. A child shares its parent's time
    with probability ``1 - f_delayed_ct``, otherwise it is delayed by an
    exponential time. Offspring past the window end are dropped along with
    their (never earlier) descendants.
    """
    out_shot, out_time = [], []
    per_shot = np.bincount(shot, minlength=n_shots)
    while len(shot) and cfg.p_crosstalk > 0:
        k = rng.poisson(cfg.p_crosstalk, size=len(shot))
        shot, time = np.repeat(shot, k), np.repeat(time, k)
        delayed = rng.random(len(shot)) < cfg.f_delayed_ct
        delay = rng.exponential(cfg.tau_delayed_ct, size=len(shot))
        time = time + np.where(delayed, delay, 0.0)
        keep = time < window[1]
        shot, time = shot[keep], time[keep]
        per_shot += np.bincount(shot, minlength=n_shots)
        _check_cap(per_shot)
        out_shot.append(shot)
        out_time.append(time)
    if not out_shot:
        return np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(out_shot), np.concatenate(out_time)


def afterpulse_events(shot, time, cfg: SiPMConfig, window, rng, recovery_tau):
    """Afterpulses of the given events (one generation).

    Poisson count with mean ``p_afterpulse`` per parent, exponential delay,
    weight ``1 - exp(-delay / recovery_tau)`` for a partially recharged cell.
    """
    if cfg.p_afterpulse == 0 or len(shot) == 0:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    k = rng.poisson(cfg.p_afterpulse, size=len(shot))
    shot, time = np.repeat(shot, k), np.repeat(time, k)
    delay = rng.exponential(cfg.tau_afterpulse, size=len(shot))
    if cfg.afterpulse_recovery:
        weight = -np.expm1(-delay / recovery_tau)
    else:
        weight = np.ones(len(shot))
    time = time + delay
    keep = time < window[1]
    return shot[keep], time[keep], weight[keep]


def simulate_events(n_photons, cfg: SiPMConfig, kernel: PulseKernel | None = None,
                    window=DEFAULT_WINDOW, rng=None):
    """Event lists for a batch of shots with the given incident photon numbers.

    Returns ``(batch, fired)`` where ``fired`` is the per-shot number of
    photon-fired cells.
    """
    rng = as_generator(rng)
    kernel = kernel or PulseKernel()
    n_photons = np.asarray(n_photons, dtype=np.int64)
    n_shots = len(n_photons)
    batch = EventBatch(n_shots, tuple(window))

    fired = fired_cells(n_photons, cfg, rng)
    photon_shot = np.repeat(np.arange(n_shots, dtype=np.int64), fired)
    batch.extend(photon_shot, np.zeros(len(photon_shot)), np.ones(len(photon_shot)), Origin.PHOTON)

    dshot, dtime = dark_events(n_shots, window, cfg.dark_rate, rng)
    batch.extend(dshot, dtime, np.ones(len(dshot)), Origin.DARK)

    cshot, ctime = crosstalk_events(batch.shot, batch.time, n_shots, cfg, window, rng)
    batch.extend(cshot, ctime, np.ones(len(cshot)), Origin.CROSSTALK)

    ashot, atime, aweight = afterpulse_events(batch.shot, batch.time, cfg, window, rng, kernel.decay_tau)
    batch.extend(ashot, atime, aweight, Origin.AFTERPULSE)
    _check_cap(batch.counts())
    return batch.sort(), fired


def _sum_by_shot(values, shot, n_shots):
    """Row sums of ``values`` grouped by the sorted ``shot`` index."""
    out = np.zeros((n_shots,) + values.shape[1:])
    if len(shot):
        uniq, starts = np.unique(shot, return_index=True)
        out[uniq] = np.add.reduceat(values, starts, axis=0)
    return out


def waveform_batch(batch: EventBatch, kernel: PulseKernel, t):
    """Noise-free waveform of every shot at times ``t``.

    ``t`` is either a 1-d grid shared by all shots or an array of shape
    ``(n_shots, n_t)``. Returns shape ``(n_shots, n_t)``.
    """
    t = np.asarray(t, dtype=float)
    shared = t.ndim == 1
    n_t = t.shape[-1]
    if len(batch) == 0:
        return np.zeros((batch.n_shots, n_t))
    tt = t[None, :] if shared else t[batch.shot]
    contrib = batch.weight[:, None] * kernel(tt - batch.time[:, None])
    return _sum_by_shot(contrib, batch.shot, batch.n_shots)


# --------------------------------------------------------------------------
# single-shot interface

def primary_detections(n_photons: int, cfg: SiPMConfig, rng=None) -> int:
    """Cells fired by ``n_photons`` incident photons (detection + saturation)."""
    if n_photons < 0:
        raise DomainError("n_photons must be >= 0")
    return int(fired_cells([n_photons], cfg, as_generator(rng))[0])


def add_dark_counts(window, dark_rate, rng=None) -> list[CellEvent]:
    if not window[1] > window[0]:
        raise DomainError("window must have t_max > t_min")
    _, times = dark_events(1, window, dark_rate, as_generator(rng))
    return [CellEvent(float(t), 1.0, Origin.DARK) for t in times]


def add_crosstalk(parents, cfg: SiPMConfig, rng=None, window=DEFAULT_WINDOW) -> list[CellEvent]:
    """Cross-talk offspring (all generations) of ``parents``."""
    times = np.array([e.time for e in parents], dtype=float)
    _, ctime = crosstalk_events(np.zeros(len(times), np.int64), times, 1, cfg, window, as_generator(rng))
    return [CellEvent(float(t), 1.0, Origin.CROSSTALK) for t in ctime]


def add_afterpulses(parents, cfg: SiPMConfig, rng=None, kernel: PulseKernel | None = None,
                    window=DEFAULT_WINDOW) -> list[CellEvent]:
    kernel = kernel or PulseKernel()
    times = np.array([e.time for e in parents], dtype=float)
    _, atime, aweight = afterpulse_events(np.zeros(len(times), np.int64), times, cfg, window,
                                          as_generator(rng), kernel.decay_tau)
    return [CellEvent(float(t), float(w), Origin.AFTERPULSE) for t, w in zip(atime, aweight)]


def build_event_list(n_photons: int, cfg: SiPMConfig, kernel: PulseKernel | None = None,
                     window=DEFAULT_WINDOW, rng=None) -> EventList:
    batch, _ = simulate_events([n_photons], cfg, kernel, window, rng)
    return batch.event_list(0)


def evaluate_waveform(ev: EventList, kernel: PulseKernel, t):
    """Exact superposition ``sum_j w_j k(t - t_j)`` at time(s) ``t``."""
    t = np.asarray(t, dtype=float)
    if not ev.events:
        v = np.zeros_like(t)
    else:
        v = np.sum(ev.weights[:, None] * kernel(t.reshape(1, -1) - ev.times[:, None]), axis=0).reshape(t.shape)
    return float(v) if v.ndim == 0 else v


def write_events_csv(batch: EventBatch, path, shot_offset=0):
    """Debug dump of a batch as ``shot,time_ns,weight,origin`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("shot,time_ns,weight,origin\n")
        for s, t, w, o in zip(batch.shot, batch.time, batch.weight, batch.origin):
            fh.write(f"{int(s) + shot_offset},{float(t)!r},{float(w)!r},{Origin(int(o)).name.lower()}\n")
