"""Energy-based generator matching for Boltzmann samplers."""

__version__ = "0.1.0"
