"""Desk-scale score distillation lab: SDS vs DDS editing on a toy pixel-space diffusion model."""

__version__ = "0.1.0"
