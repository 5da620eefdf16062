"""Two-stage unsupervised segmentation adaptation with memory regularization, in numpy."""

__version__ = "0.1.0"
