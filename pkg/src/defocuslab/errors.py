"""Exception hierarchy shared by all modules.

The CLI maps each family onto its own exit code.
"""


class DefocusLabError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DefocusLabError, ValueError):
    """Invalid parameters or configuration values."""


class ShapeError(DefocusLabError, ValueError):
    pass


class RangeError(DefocusLabError, ValueError):
    """A defocus value or radius class is outside the supported range."""


class SizeError(ShapeError):
    pass


class NumericalError(DefocusLabError, ArithmeticError):
    """Non-finite losses or gradients, degenerate kernels."""


class DegenerateKernelError(NumericalError):
    def __init__(self, radius_class, message="kernel has no positive mass"):
        self.radius_class = radius_class
        super().__init__(f"radius class {radius_class}: {message}")


class DatasetError(DefocusLabError):
    pass


class LayoutError(DatasetError):
    pass


class CropError(DatasetError, ValueError):
    pass


class CapabilityError(DefocusLabError, RuntimeError):
    """A requested optional capability (pretrained weights, scorer) is missing."""
