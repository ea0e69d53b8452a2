"""Kidney tumor segmentation with cognizant sampling.

Core package for a two-arm segmentation experiment: a baseline 3D U-Net
trained with uniform case sampling, and a second arm retrained with
per-case sampling weights derived from clinical characteristics that a
cross-validated LASSO associates with tumor Dice on the validation split.
"""

__version__ = "0.1.0"
