from .base import Effect, peak_normalize_tensor
from .clipper import ChebyshevClipper, ParametricClipper, TaylorClipper
from .dynamics import Compressor, SimplifiedCompressor
from .eq import GraphicEQ, ParametricEQ

__all__ = [
    "Effect", "peak_normalize_tensor", "ParametricEQ", "GraphicEQ", "Compressor",
    "SimplifiedCompressor", "ParametricClipper", "TaylorClipper", "ChebyshevClipper",
]
