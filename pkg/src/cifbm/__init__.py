"""Information-geometric parametric reduction for Boltzmann machines."""

__version__ = "0.1.0"
