"""Paramagnetic / diamagnetic susceptibility separation and population atlases."""
from .config import PipelineConfig, __version__
from .separation import ChiSeparationResult, SolverConfig, separate
from .volume import BinaryMask, LabelVolume, MultiEchoGre, ScalarVolume, Unit, VolumeError

__all__ = [
    "__version__",
    "PipelineConfig",
    "SolverConfig",
    "ChiSeparationResult",
    "separate",
    "ScalarVolume",
    "BinaryMask",
    "LabelVolume",
    "MultiEchoGre",
    "Unit",
    "VolumeError",
]
