"""World models with a state-space long-context branch and a diffusion next-frame generator."""

__version__ = "0.1.0"
