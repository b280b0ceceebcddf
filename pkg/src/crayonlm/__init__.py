"""Crayon-prompted toy multimodal LM with NF4 dual-adapter training and object probes."""

__version__ = "0.1.0"
