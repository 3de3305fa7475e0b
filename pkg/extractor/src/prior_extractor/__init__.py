"""Offline anatomical-prior extraction for CT rasters.

Encodes each image and a list of anatomical descriptors, scores their
similarity, and softmaxes the scores into a per-image probability file
consumed by the denoiser's training pipeline.
"""

from .extract import DEFAULT_DESCRIPTORS, DEFAULT_TEMPLATE, ExtractorError, extract_priors
from .backends import HistogramBackend, BiomedClipBackend

__version__ = "0.1.0"
