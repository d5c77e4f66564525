"""Construction and verification of port-Hamiltonian representations."""

__version__ = "0.1.0"
