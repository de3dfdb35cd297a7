"""Numerical laboratory for the cubic NLS on R x T^d with a convolution potential."""

__version__ = "0.1.0"

from .errors import NumericalFailure
from .lattice import LatticePoint, Potential, Quadruple, make_potential, sample_potential, zero_potential
from .resonance import QuadrupleIndex, enumerate_gamma0, gamma0_bruteforce, lattice_ball

__all__ = [
    "__version__", "NumericalFailure", "LatticePoint", "Potential", "Quadruple",
    "make_potential", "sample_potential", "zero_potential",
    "QuadrupleIndex", "enumerate_gamma0", "gamma0_bruteforce", "lattice_ball",
]
