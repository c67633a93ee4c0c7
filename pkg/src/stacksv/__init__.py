"""Speaker-verification backend over stacked layer-wise features."""

from .kernels import active_backend

__version__ = "0.1.0"
__all__ = ["active_backend", "__version__"]
