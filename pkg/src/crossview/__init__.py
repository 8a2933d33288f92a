"""Satellite-to-ground and ground-to-satellite image synthesis with a geometry-conditioned diffusion model."""

__version__ = "0.1.0"
