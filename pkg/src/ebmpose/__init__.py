"""Energy-based diffusion for in-hand 6D pose estimation from simulated tactile imprints."""

__version__ = "0.1.0"
