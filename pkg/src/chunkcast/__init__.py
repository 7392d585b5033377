"""Audio-driven streaming video diffusion at desk scale."""

__version__ = "0.1.0"
