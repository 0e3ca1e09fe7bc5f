"""Invariant phase-space tori for axisymmetric potentials.

Action-angle variables for a separable (Staeckel) toy Hamiltonian, plus a
Fourier-series canonical transformation fitted by least squares that warps
the toy tori into invariant tori of a non-separable target Hamiltonian.
"""

__version__ = "0.1.0"
