"""Multi-step denoising with chains of cycle-consistent adversarial networks."""

__version__ = "0.1.0"
