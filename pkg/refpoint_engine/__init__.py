"""Multimodal driver referencing: synthetic sensor streams in, fused direction and matched ROI out."""
from .errors import DataError, NumericalError, RefpointError, UsageError

__all__ = ["RefpointError", "DataError", "NumericalError", "UsageError"]
