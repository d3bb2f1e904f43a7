"""Galerkin simulation and Monte-Carlo estimation for 3D Navier-Stokes with transport and Kirchhoff noise."""

__version__ = "0.1.0"
