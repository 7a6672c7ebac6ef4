"""Multimodal meta-learned visual navigation at desk scale."""

__version__ = "0.1.0"
