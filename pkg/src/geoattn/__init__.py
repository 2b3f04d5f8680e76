"""Hybrid graph-attention + latent-Gaussian geostatistics toolkit."""

__version__ = "0.1.0"

from . import attnfield, errors, evalkit, gatv2, geostat, numkit, simgen

__all__ = [
    "attnfield",
    "errors",
    "evalkit",
    "gatv2",
    "geostat",
    "numkit",
    "simgen",
    "__version__",
]
