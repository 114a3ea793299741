"""Numeric core: networks, diffusion, posterior/controller, quantizer, pipeline and metrics."""

from .errors import StyleBridgeError

__all__ = ["StyleBridgeError"]
