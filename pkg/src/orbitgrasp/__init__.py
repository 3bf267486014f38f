"""Equivariant grasp-quality fields evaluated on contact-point orbits."""

__version__ = "0.1.0"
__all__ = ["so3", "cloud", "orbit", "equinet", "scenegen", "bench", "config", "cli"]
