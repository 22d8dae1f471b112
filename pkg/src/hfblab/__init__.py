"""Spectral simulator and numerical lab for the Hartree-Fock-Bogoliubov system."""

__version__ = "0.1.0"
