"""Training-free open-vocabulary segmentation with a learnable joint
bilateral feature upsampler."""

__version__ = "0.1.0"
