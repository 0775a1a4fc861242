"""Any-precision weight quantization toolkit.

Quantize a weight matrix once at a parent bit-width and run it at any lower
bit-width by reading only the most significant bitplanes of its codes.
"""

from .errors import (
    AnyPrecError,
    ApqFormatError,
    CodeRangeError,
    LayoutError,
    ParameterError,
    ShapeError,
)
from .quantizer import (
    AnyPrecisionLayer,
    ChannelQuantization,
    SensitivityMap,
    build_any_precision,
    continue_upscale,
    estimate_sensitivity_diag,
    kmeans_1d_weighted,
    quantize_seed,
    upscale,
)

__all__ = [
    "AnyPrecError",
    "ApqFormatError",
    "CodeRangeError",
    "LayoutError",
    "ParameterError",
    "ShapeError",
    "AnyPrecisionLayer",
    "ChannelQuantization",
    "SensitivityMap",
    "build_any_precision",
    "continue_upscale",
    "estimate_sensitivity_diag",
    "kmeans_1d_weighted",
    "quantize_seed",
    "upscale",
]

__version__ = "0.1.0"
