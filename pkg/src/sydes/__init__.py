"""Symmetrical bidirectional image-text model: mixed-scale image processing,
masked-patch reconstruction with a text-guided decoder, an image-guided text
decoder, and a two-stage freeze/unfreeze training protocol."""

__version__ = "0.1.0"
