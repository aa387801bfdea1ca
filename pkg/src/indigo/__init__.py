"""INN-guided diffusion sampling for inverse problems, at desk scale."""

__version__ = "0.1.0"
