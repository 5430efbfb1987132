"""Defocus deblurring toolkit: blur kernels, forward reblur model, defocus map
estimation, map-guided GAN deblurring, Wiener baseline and evaluation."""

from .errors import (
    CapabilityError,
    ConfigError,
    DatasetError,
    DefocusLabError,
    DegenerateKernelError,
    NumericalError,
    RangeError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigError",
    "DatasetError",
    "DefocusLabError",
    "DegenerateKernelError",
    "NumericalError",
    "RangeError",
    "ShapeError",
]
