"""Finite-difference laboratory for the harmonic-Ricci flow on periodic surfaces."""
from . import entropy, errors, flow_engine, grid_geometry, spectral, variation_lab

__all__ = ["entropy", "errors", "flow_engine", "grid_geometry", "spectral", "variation_lab"]
__version__ = "0.1.0"
