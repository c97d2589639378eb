"""Two-stage trajectory planning: autoregressive drafting plus short guided diffusion refinement."""
__version__ = "0.1.0"
