"""Uncertainty-aware segmentation, contrastive pretraining and subject-level
classification for hand radiograph screening, at desk scale."""

__version__ = "0.1.0"
