"""Fuse 2D building footprints with street-level photos: camera position
refinement, building height estimation, facade masks and prism models."""

from .errors import MapFuseError

__version__ = "0.1.0"
__all__ = ["MapFuseError", "__version__"]
