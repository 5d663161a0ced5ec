"""Joint sensing-waveform and receive-beamformer design for uplink ISAC."""

from .metrics import PowerSpectrum, RatePair, Waveform, wsnr
from .scene import ConfigError, Dataset, Scene, SystemConfig, generate_dataset, make_scene

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Dataset", "PowerSpectrum", "RatePair", "Scene", "SystemConfig",
    "Waveform", "generate_dataset", "make_scene", "wsnr",
]
