"""Twin-surface depth extrapolation with asymmetric linear losses, at desk scale."""

__version__ = "0.1.0"

from .ambiguity import (AmbiguityModel, expected_loss, fusion_minimizer, gamma_threshold,
                        minimizer)
from .core import DepthMap, TwinSurfaceField, sigmoid
from .fitter import (FitConfig, FitReport, ambiguity_map, fit_kernel_regression,
                     fit_stochastic_pixel, fuse)
from .losses import LossConfig, ale, combined_loss, fusion_loss, rale
from .metrics import MetricsReport, error_diff, region_metrics, standard_metrics
from .scenegen import accumulate_semidense, grid_sample, lidar_sample, make_scene

__all__ = [
    "AmbiguityModel", "DepthMap", "FitConfig", "FitReport", "LossConfig", "MetricsReport",
    "TwinSurfaceField", "accumulate_semidense", "ale", "ambiguity_map", "combined_loss",
    "error_diff", "expected_loss", "fit_kernel_regression", "fit_stochastic_pixel", "fuse",
    "fusion_loss", "fusion_minimizer", "gamma_threshold", "grid_sample", "lidar_sample",
    "make_scene", "minimizer", "rale", "region_metrics", "sigmoid", "standard_metrics",
]
