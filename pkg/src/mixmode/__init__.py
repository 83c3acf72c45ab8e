"""Simulation and verification toolkit for rolling updates of microservices."""

__version__ = "0.1.0"
