"""Desk-scale OCR pre-training: online text rendering, read-task sequence codecs,
character-wise supervised contrastive learning, and a reproducible trainer."""

__version__ = "0.1.0"
