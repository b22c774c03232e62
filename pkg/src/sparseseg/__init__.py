"""Few-shot semantic segmentation from sparse pixel labels via second-order meta-learning."""

from .errors import ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "__version__"]
