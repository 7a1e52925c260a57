"""Instance-aware decomposition and completion of 2D Gaussian splat scenes."""

__version__ = "0.1.0"
