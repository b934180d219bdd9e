"""Dynamic programming and viscosity-solution laboratory for controlled ODEs with random path-dependent coefficients."""

__version__ = "0.1.0"
