"""Equation-free bifurcation analysis of ring-road traffic in diffusion-map coordinates."""
from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
