"""Autonomous ultrasound vessel-screening simulator.

Estimates a tube's centerline direction and radius from streaming
cross-sectional boundary clouds and steers a simulated probe so that the
image plane stays normal to the vessel while keeping it laterally centered.
"""

from vesselscreen.geometry import (
    GeometryError,
    ImageCalibration,
    Pose,
    image_to_base,
    pixel_to_probe,
    plane_normal_from_points,
)
from vesselscreen.buffer import BoundaryCloud, CloudRingBuffer
from vesselscreen.centerline import (
    CenterlineEstimate,
    OptimizerConfig,
    estimate_radius,
    gradient_direction,
    objective,
    tick_tock_step,
)

__all__ = [
    "BoundaryCloud",
    "CenterlineEstimate",
    "CloudRingBuffer",
    "GeometryError",
    "ImageCalibration",
    "OptimizerConfig",
    "Pose",
    "estimate_radius",
    "gradient_direction",
    "image_to_base",
    "objective",
    "pixel_to_probe",
    "plane_normal_from_points",
    "tick_tock_step",
]

__version__ = "0.1.0"
