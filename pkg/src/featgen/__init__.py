"""featgen: feature-level GAN augmentation for imbalanced volumetric imaging data."""

__version__ = "0.1.0"
