"""Port-extracted EM/circuit co-simulation and feed optimisation."""

__version__ = "0.1.0"
