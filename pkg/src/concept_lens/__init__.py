"""Concept directions, image synthesis and cross-modal alignment probes for VLMs."""

__version__ = "0.1.0"
