"""Weakly supervised attended-object detection from gaze points and frame-level labels."""

__version__ = "0.1.0"
