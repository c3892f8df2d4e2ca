"""CPU RGB-D SLAM on a feature-embedded Gaussian splat map."""

__version__ = "0.1.0"
