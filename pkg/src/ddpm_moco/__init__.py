"""Diffusion-based defect image synthesis and momentum-contrast pretraining at desk scale."""

__version__ = "0.1.0"
