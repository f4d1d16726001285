"""Dual-agent generative augmentation pipeline for instance-segmentation datasets."""

__version__ = "0.1.0"
