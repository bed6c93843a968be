"""Covariance-modulated optimal transport toolkit.

Submodules
----------
spd               symmetric-matrix algebra and the affine-invariant geodesic
measures          empirical measures, Gaussians, normalization maps
ot_core           exact discrete OT and Gaussian Wasserstein distances
moment_geodesics  geodesics in (mean, covariance) space
shape_geodesics   covariance-constrained geodesics via the ω fixed point
flows             moment flows, decay bounds and the ensemble Kalman sampler
cli               command-line front end
"""
from .errors import CovotError

__version__ = "0.1.0"

__all__ = ["CovotError", "__version__"]
