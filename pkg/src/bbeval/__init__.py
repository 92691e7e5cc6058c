"""Desk-scale benchmark of image-classifier defenses against
substitute-model black-box attacks."""

__version__ = "0.1.0"
