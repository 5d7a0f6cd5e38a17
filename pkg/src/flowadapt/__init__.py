"""Flow-augmented self-training for cross-domain segmentation at desk scale."""

__version__ = "0.1.0"
