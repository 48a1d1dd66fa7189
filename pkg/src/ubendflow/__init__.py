"""U-bend channel geometry generation, steady flow solving, and a
convolutional surrogate that predicts velocity fields from geometry images."""

__version__ = "0.1.0"
