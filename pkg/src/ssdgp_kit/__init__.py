"""State-space deep Gaussian processes, Taylor moment expansions and Gaussian filtering."""

__version__ = "0.1.0"

from .filtering import MeasurementModel, PosteriorTrack, TimeSeries, gaussian_filter, gaussian_smoother, kalman_filter, rts_smoother
from .sde import SdeModel, LinearSdeModel
from .ssdgp import build_graph, assemble, ssdgp_regress
from .ssgp import MaternParams, matern_ssm, ssgp_regress
from .estimators import (
    DriftRegressor,
    MapSsdgpRegressor,
    SpectrogramTransformer,
    SsdgpRegressor,
    SsgpRegressor,
)

__all__ = [
    "__version__",
    "MeasurementModel",
    "PosteriorTrack",
    "TimeSeries",
    "gaussian_filter",
    "gaussian_smoother",
    "kalman_filter",
    "rts_smoother",
    "SdeModel",
    "LinearSdeModel",
    "build_graph",
    "assemble",
    "ssdgp_regress",
    "MaternParams",
    "matern_ssm",
    "ssgp_regress",
    "SsgpRegressor",
    "SsdgpRegressor",
    "MapSsdgpRegressor",
    "DriftRegressor",
    "SpectrogramTransformer",
]
