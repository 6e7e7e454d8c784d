"""Fog simulation, fog density estimation, fog densification and curriculum
adaptation of semantic segmentation toward dense fog."""

__version__ = "0.1.0"
