"""Spectral analysis and evolution for 2x2 Dirac-type operators with periodic, antiperiodic and Dirichlet boundary conditions."""
__version__ = "0.1.0"
