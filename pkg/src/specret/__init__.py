"""Probabilistic LWIR emissivity retrieval.

A physics forward model builds synthetic hyperspectral scenes; a conditioned
latent-variable network with a RealNVP posterior turns a pixel's radiance into
a Monte-Carlo emissivity distribution; a variance-aware matcher ranks library
materials against it.
"""

__version__ = "0.1.0"
