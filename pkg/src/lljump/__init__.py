"""Jump planning and validation on the lump-leg single rigid body model."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
