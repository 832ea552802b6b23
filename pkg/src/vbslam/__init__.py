"""Distributed variable-baseline stereo SLAM for a pair of aerial agents."""

__version__ = "0.1.0"
