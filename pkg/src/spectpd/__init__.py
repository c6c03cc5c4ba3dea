"""SPECT-image Parkinson's disease recognition with interpretable 3D convnets.

Trains small 3D convolutional classifiers from scratch on synthetic DaT
phantom volumes, computes six attribution maps per prediction, and scores
interpretation quality against segmented striatal ground truth.
"""

__version__ = "0.1.0"
