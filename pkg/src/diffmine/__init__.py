"""Typical-element mining with conditional denoisers."""
from .core import (BackendError, Conditioning, DenoiserBackend, ImageRecord, LabelSet, NoiseSchedule,
                   forward_noise, loss_map)
from .mining import MinerConfig, PatchRef
from .typicality import TypicalityConfig, TypicalityMap, estimate_typicality

__version__ = "0.1.0"

__all__ = ["BackendError", "Conditioning", "DenoiserBackend", "ImageRecord", "LabelSet", "MinerConfig",
           "NoiseSchedule", "PatchRef", "TypicalityConfig", "TypicalityMap", "estimate_typicality",
           "forward_noise", "loss_map"]
