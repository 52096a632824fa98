"""Conditional distribution matching with loss-guided diffusion and consistency-model samplers."""

__version__ = "0.1.0"
