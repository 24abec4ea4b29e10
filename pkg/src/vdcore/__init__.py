"""Decoupled virtual-core programs: generation and simulation."""

__version__ = "0.1.0"
