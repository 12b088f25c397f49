"""Monte Carlo twin-beam photon statistics read out by SiPM detectors."""
from .daq import BoxcarConfig, DigitizerConfig, PeakHoldConfig
from .errors import (
    CascadeOverflowError,
    ConfigError,
    DataError,
    DomainError,
    EstimationError,
    InsufficientStatisticsError,
    TwinSipmError,
    UndefinedEstimateError,
)
from .experiment import ExperimentConfig, condition_on, run_scan, simulate_shots
from .photonstats import DetectionParams, TwbSourceParams
from .sipm import PulseKernel, SiPMConfig

__version__ = "0.1.0"

__all__ = [
    "BoxcarConfig", "DigitizerConfig", "PeakHoldConfig",
    "CascadeOverflowError", "ConfigError", "DataError", "DomainError", "EstimationError",
    "InsufficientStatisticsError", "TwinSipmError", "UndefinedEstimateError",
    "ExperimentConfig", "condition_on", "run_scan", "simulate_shots",
    "DetectionParams", "TwbSourceParams", "PulseKernel", "SiPMConfig",
]
