"""Pore-scale electrokinetic transport toolkit.

Solves the coupled Stokes / Nernst-Planck / Poisson system on periodic
perforated geometries, computes effective coefficients from unit-cell
problems, runs the corresponding upscaled models, and verifies the
upscaling numerically by comparing cell-averaged micro solutions against
the macro solver over a sequence of cell sizes.
"""

__version__ = "0.1.0"
