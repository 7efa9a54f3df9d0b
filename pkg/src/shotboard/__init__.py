"""Multi-shot storyboard generation with a toy diffusion transformer."""

__version__ = "0.1.0"
