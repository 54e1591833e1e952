"""Numerical laboratory for a chemotaxis-fluid system on a wall-bounded strip.

The package solves the coupled cell/oxygen/velocity system for oxygen
diffusivity eps >= 0, builds the weak-diffusion boundary-layer expansion
(layer profiles, composite approximations, remainders, residual forcings),
and measures convergence rates as eps -> 0.
"""

__version__ = "0.1.0"
