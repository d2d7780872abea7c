"""Numerical laboratory for the diffusively scaled Vlasov-Poisson-Boltzmann system."""

__version__ = "0.1.0"
