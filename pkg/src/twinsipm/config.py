"""JSON run configuration: schema, validation and conversion to model objects.

A run file looks like::

    {
      "schema_version": 1,
      "seed": 20191021,
      "n_shots": 100000,
      "source": {"scan": [1.25, 5.0], "modes": 100},
      "detectors": [{"pde": 0.4}, {"pde": 0.4}],
      "chains": [{"type": "boxcar", "gate_width": 10}]
    }

Every section is optional except ``schema_version``; omitted fields take the
library defaults. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
from pathlib import Path

import jsonschema

from . import photonstats as ps
from .daq import BoxcarConfig, DigitizerConfig, PeakHoldConfig
from .errors import ConfigError, TwinSipmError
from .experiment import DEFAULT_CHAINS, ConditionalTheory, ExperimentConfig
from .sipm import DEFAULT_WINDOW, PulseKernel, SiPMConfig

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_interval = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


DETECTOR_SCHEMA = _obj({
    "n_cells": {"type": "integer", "minimum": 1},
    "pde": _prob,
    "dark_rate": {"type": "number", "minimum": 0},
    "p_crosstalk": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "f_delayed_ct": _prob,
    "tau_delayed_ct": _pos,
    "p_afterpulse": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "tau_afterpulse": _pos,
    "baseline_noise_sigma": {"type": "number", "minimum": 0},
    "afterpulse_recovery": {"type": "boolean"},
})

CHAIN_SCHEMA = {"oneOf": [
    _obj({"type": {"const": "boxcar"}, "gate_width": _pos, "gate_center": _num}, ["type", "gate_width"]),
    _obj({
        "type": {"const": "digitizer"},
        "gate_width": _pos,
        "gate_center": _num,
        "sample_rate": _pos,
        "bits": {"type": "integer", "minimum": 1, "maximum": 24},
        "full_scale": _pos,
        "phase_jitter": {"type": "boolean"},
        "pedestal": {"type": "number", "minimum": 0},
    }, ["type", "gate_width"]),
    _obj({"type": {"const": "peakhold"}, "window": _interval, "search_step": _pos}, ["type"]),
]}

SCHEMA = _obj({
    "schema_version": {"type": "integer"},
    "seed": {"type": "integer", "minimum": 0},
    "n_shots": {"type": "integer", "minimum": 100},
    "workers": {"type": "integer", "minimum": 1},
    "output_dir": {"type": "string"},
    "source": _obj({
        "scan": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "modes": _pos,
    }),
    "detectors": {"type": "array", "items": DETECTOR_SCHEMA, "minItems": 2, "maxItems": 2},
    "kernel": _obj({"rise_tau": _pos, "decay_tau": _pos, "amplitude": _pos}),
    "window": _interval,
    "chains": {"type": "array", "items": CHAIN_SCHEMA, "minItems": 1},
    "analysis": _obj({
        "n_bootstrap": {"type": "integer", "minimum": 50},
        "min_count": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
    }),
    "conditioning": _obj({
        "m_cond": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "chain": {"type": ["string", "null"]},
        "conditioning_arm": {"enum": [1, 2]},
        "scan_index": {"type": "integer", "minimum": 0},
        "theory": {"oneOf": [
            {"const": "estimate"},
            _obj({"mean_m2": _pos, "modes": _pos, "eta": {"type": "number", "exclusiveMinimum": 0,
                                                          "maximum": 1}},
                 ["mean_m2", "modes", "eta"]),
        ]},
    }),
}, ["schema_version"])


@dataclass(frozen=True)
class AnalysisSettings:
    n_bootstrap: int = ps.N_BOOTSTRAP
    min_count: int = 2
    seed: int = 0


@dataclass(frozen=True)
class ConditioningSettings:
    m_cond: tuple = tuple(range(9))
    chain: str | None = None          # None: the shortest boxcar (or first chain)
    conditioning_arm: int = 1         # 1-based, as written in the file
    scan_index: int = 0
    theory: ConditionalTheory | None = None   # None: estimate from the data


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    output_dir: str = "out"
    analysis: AnalysisSettings = AnalysisSettings()
    conditioning: ConditioningSettings = ConditioningSettings()
    source_text: dict = field(default_factory=dict, compare=False)

    def resolved(self) -> dict:
        """Fully resolved configuration as a JSON-ready dict (audit trail).

        The worker count and output directory are left out: neither can
        change a result, and leaving them out keeps outputs byte-identical
        across parallelism settings and output locations.
        """
        d = to_dict(self)
        del d["workers"], d["output_dir"]
        return d


def _chain_from_dict(d):
    d = dict(d)
    kind = d.pop("type")
    if kind == "boxcar":
        return BoxcarConfig(**d)
    if kind == "digitizer":
        return DigitizerConfig(**d)
    if "window" in d:
        d["window"] = tuple(d["window"])
    return PeakHoldConfig(**d)


def _chain_to_dict(c):
    d = {"type": c.kind, **{k: v for k, v in asdict(c).items() if v is not None}}
    if "window" in d:
        d["window"] = list(d["window"])
    return d


def from_dict(data: dict) -> RunConfig:
    """Validate ``data`` against the schema and build a :class:`RunConfig`."""
    version = data.get("schema_version") if isinstance(data, dict) else None
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n" + "\n".join(lines))

    src = data.get("source", {})
    cond = data.get("conditioning", {})
    try:
        detectors = tuple(SiPMConfig(**d) for d in data.get("detectors", [{}, {}]))
        chains = tuple(_chain_from_dict(c) for c in data["chains"]) if "chains" in data else DEFAULT_CHAINS
        defaults = ExperimentConfig()
        exp = ExperimentConfig(
            scan=tuple(float(x) for x in src.get("scan", defaults.scan)),
            modes=float(src.get("modes", defaults.modes)),
            detectors=detectors,
            kernel=PulseKernel(**data.get("kernel", {})),
            chains=chains,
            n_shots=int(data.get("n_shots", defaults.n_shots)),
            master_seed=int(data.get("seed", defaults.master_seed)),
            window=tuple(float(x) for x in data.get("window", DEFAULT_WINDOW)),
            n_bootstrap=int(data.get("analysis", {}).get("n_bootstrap", defaults.n_bootstrap)),
            workers=int(data.get("workers", defaults.workers)),
        )
        theory = cond.get("theory", "estimate")
        conditioning = ConditioningSettings(
            m_cond=tuple(cond.get("m_cond", ConditioningSettings.m_cond)),
            chain=cond.get("chain"),
            conditioning_arm=cond.get("conditioning_arm", 1),
            scan_index=cond.get("scan_index", 0),
            theory=None if theory == "estimate" else ConditionalTheory(**theory),
        )
        analysis = AnalysisSettings(**data.get("analysis", {}))
    except TwinSipmError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if not exp.window[1] > exp.window[0]:
        raise ConfigError("window must have t_max > t_min")
    if conditioning.chain is not None and conditioning.chain not in exp.labels:
        raise ConfigError(f"conditioning chain {conditioning.chain!r} not among {list(exp.labels)}")
    if conditioning.scan_index >= len(exp.scan):
        raise ConfigError(f"conditioning scan_index {conditioning.scan_index} out of range")
    return RunConfig(exp, data.get("output_dir", "out"), analysis, conditioning, data)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return from_dict(data)


def to_dict(run: RunConfig) -> dict:
    exp = run.experiment
    cond = run.conditioning
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": exp.master_seed,
        "n_shots": exp.n_shots,
        "workers": exp.workers,
        "output_dir": run.output_dir,
        "source": {"scan": list(exp.scan), "modes": exp.modes},
        "detectors": [asdict(d) for d in exp.detectors],
        "kernel": asdict(exp.kernel),
        "window": list(exp.window),
        "chains": [_chain_to_dict(c) for c in exp.chains],
        "analysis": asdict(run.analysis),
        "conditioning": {
            "m_cond": list(cond.m_cond),
            "chain": cond.chain,
            "conditioning_arm": cond.conditioning_arm,
            "scan_index": cond.scan_index,
            "theory": "estimate" if cond.theory is None else asdict(cond.theory),
        },
    }


def with_overrides(run: RunConfig, seed=None, n_shots=None, output_dir=None, workers=None) -> RunConfig:
    data = to_dict(run)
    if seed is not None:
        data["seed"] = seed
    if n_shots is not None:
        data["n_shots"] = n_shots
    if workers is not None:
        data["workers"] = workers
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    return from_dict(data)


def default_config_path(name: str) -> Path:
    """Path of a bundled example configuration (``default``, ``ideal``, ``anchor``)."""
    return Path(__file__).with_name("configs") / f"{name}.json"

