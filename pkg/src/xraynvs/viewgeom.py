"""Hemisphere view sampling and relative view encoding.

Conventions, fixed once for the whole pipeline:

- Poses live on the upper hemisphere and always look at the world origin.
- Elevation is measured from the equator toward the pole, in [0, pi/2].
- The +z pole is the patient-posterior direction, so the pose at the pole is
  the standard posterior-anterior (PA) radiograph geometry. Hemisphere lattice
  index 0 is exactly that pole and serves as the canonical source view.
- position = radius * (cos e cos a, cos e sin a, sin e), radius in metres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
# azimuth increment of the Fibonacci lattice, 2*pi*(1 - 1/phi) ~ 2.39996 rad
GOLDEN_ANGLE = 2.0 * math.pi * (1.0 - 1.0 / GOLDEN_RATIO)


@dataclass(frozen=True)
class ViewPose:
    """Source position on the view hemisphere, looking at the origin."""

    azimuth_rad: float
    elevation_rad: float
    radius_m: float

    def __post_init__(self):
        if not 0.0 <= self.elevation_rad <= math.pi / 2 + 1e-12:
            raise ValueError(f"elevation must lie in [0, pi/2], got {self.elevation_rad}")
        if self.radius_m <= 0:
            raise ValueError(f"radius must be positive, got {self.radius_m}")

    @property
    def position_m(self) -> np.ndarray:
        ce = math.cos(self.elevation_rad)
        return self.radius_m * np.array(
            [
                ce * math.cos(self.azimuth_rad),
                ce * math.sin(self.azimuth_rad),
                math.sin(self.elevation_rad),
            ]
        )

    @property
    def position_mm(self) -> np.ndarray:
        return self.position_m * 1000.0

    def view_direction(self) -> np.ndarray:
        """Unit vector from the source toward the look-at center (origin)."""
        p = self.position_m
        return -p / np.linalg.norm(p)


def pose_from_angles(azimuth_rad: float, elevation_rad: float, radius_m: float) -> ViewPose:
    """Construct a pose, normalizing azimuth into [0, 2*pi)."""
    return ViewPose(
        azimuth_rad=float(azimuth_rad) % (2.0 * math.pi),
        elevation_rad=float(elevation_rad),
        radius_m=float(radius_m),
    )


def fibonacci_hemisphere(n: int, radius_m: float) -> list[ViewPose]:
    """Near-uniform hemisphere lattice of ``n`` poses at the given radius.

    Index i has sin(elevation_i) = 1 - i / max(n - 1, 1) (pole down to the
    equator, equal-area in sin e) and azimuth_i = i * golden angle mod 2*pi.
    Pose 0 is exactly the pole, i.e. the PA source view.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 poses, got {n}")
    if radius_m <= 0:
        raise ValueError(f"radius must be positive, got {radius_m}")
    denom = max(n - 1, 1)
    poses = []
    for i in range(n):
        sin_e = 1.0 - i / denom
        elevation = math.asin(min(1.0, max(0.0, sin_e)))
        azimuth = (i * GOLDEN_ANGLE) % (2.0 * math.pi)
        poses.append(ViewPose(azimuth_rad=azimuth, elevation_rad=elevation, radius_m=radius_m))
    return poses


def simple_arc_views(step_deg: float, radius_m: float = 1.8) -> list[ViewPose]:
    """Great-circle arc through the PA pole, the classic CT-rotation sweep.

    The arc angle theta measures angular displacement from the PA direction
    within the x-z plane: position(theta) = r (sin theta, 0, cos theta).
    Poses cover theta = -90..+90 degrees in ``step_deg`` increments with 0
    excluded (that is the source view itself), so step 5 yields 36 poses.
    Positive theta maps to azimuth 0, negative to azimuth pi.
    """
    if step_deg <= 0:
        raise ValueError(f"step must be positive, got {step_deg}")
    k = 90.0 / step_deg
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"step {step_deg} does not divide 90 evenly")
    k = int(round(k))
    poses = []
    for j in range(-k, k + 1):
        if j == 0:
            continue
        theta = math.radians(j * step_deg)
        azimuth = 0.0 if theta > 0 else math.pi
        elevation = math.pi / 2 - abs(theta)
        poses.append(ViewPose(azimuth_rad=azimuth, elevation_rad=elevation, radius_m=radius_m))
    return poses


def relative_view_encoding(src: ViewPose, tgt: ViewPose) -> np.ndarray:
    """4-vector conditioning signal for the target view relative to the source.

    (delta elevation, sin delta azimuth, cos delta azimuth, delta radius).
    The sin/cos pair keeps the encoding continuous across the azimuth wrap.
    """
    da = tgt.azimuth_rad - src.azimuth_rad
    return np.array(
        [
            tgt.elevation_rad - src.elevation_rad,
            math.sin(da),
            math.cos(da),
            tgt.radius_m - src.radius_m,
        ]
    )


def pa_pose(radius_m: float = 1.8) -> ViewPose:
    """The canonical posterior-anterior source pose at the hemisphere pole."""
    return ViewPose(azimuth_rad=0.0, elevation_rad=math.pi / 2, radius_m=radius_m)
