"""Pedestrian centroid forecasting as a learned correction over constant velocity."""

from trajforecast.kinematics import (
    BoundingBox,
    Centroid,
    ForecastConfig,
    Source,
    Track,
    Velocity,
    ca_forecast,
    centroid_of_box,
    cv_forecast,
    estimate_velocity,
    recover_locations,
    residual_target,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Centroid",
    "ForecastConfig",
    "Source",
    "Track",
    "Velocity",
    "ca_forecast",
    "centroid_of_box",
    "cv_forecast",
    "estimate_velocity",
    "recover_locations",
    "residual_target",
]
