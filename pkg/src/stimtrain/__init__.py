"""Stimulative training for residual networks."""

from .nncore import DepthMask, NetworkSpec, build_network
from .sampler import SamplingRule

__version__ = "0.1.0"

__all__ = ["DepthMask", "NetworkSpec", "SamplingRule", "build_network"]
