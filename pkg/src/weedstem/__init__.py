"""Crop/weed detection with weed-stem localization and laser-weeding evaluation."""

__version__ = "0.1.0"
