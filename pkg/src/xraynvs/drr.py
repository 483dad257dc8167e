"""Cone-beam digitally reconstructed radiograph (DRR) rendering.

One ray per detector pixel is cast from the source position on the view
hemisphere through the pixel center, and the attenuation volume is integrated
along it (Beer-Lambert line integral) with fixed-step midpoint sampling and
trilinear interpolation. Perspective (cone-beam) geometry throughout, matching
clinical radiography.

Detector convention: the detector plane is perpendicular to the viewing axis
at ``source_to_detector_mm`` from the source, centered on the axis. Its
horizontal axis u is ``normalize(view_dir x z_world)`` (falling back to +y at
the poles where that cross product vanishes) and its vertical axis is
``u x view_dir``; image row 0 is the top of the detector. Rendering at a
different resolution keeps the physical detector size fixed and rescales the
pixel pitch, so resolutions are independent renders rather than resizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from xraynvs.viewgeom import ViewPose
from xraynvs.voxel import ATTENUATION, Volume, sample_trilinear_many

LINE_INTEGRAL = "line_integral"
TRANSMITTANCE = "transmittance"

# default physical detector: 300 mm square, isocenter midway to the source
DETECTOR_SIZE_MM = 300.0


@dataclass(frozen=True)
class DetectorSpec:
    """Flat detector geometry: pixel grid, pitch, and distance from source."""

    width_px: int
    height_px: int
    pixel_pitch_mm: float
    source_to_detector_mm: float

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("detector pixel counts must be positive")
        if self.pixel_pitch_mm <= 0 or self.source_to_detector_mm <= 0:
            raise ValueError("detector pitch and distance must be positive")

    @classmethod
    def for_resolution(
        cls,
        resolution_px: int,
        physical_size_mm: float = DETECTOR_SIZE_MM,
        source_to_detector_mm: float = 3600.0,
    ) -> "DetectorSpec":
        """Square detector of fixed physical size at the given pixel count."""
        return cls(
            width_px=resolution_px,
            height_px=resolution_px,
            pixel_pitch_mm=physical_size_mm / resolution_px,
            source_to_detector_mm=source_to_detector_mm,
        )


@dataclass
class Image:
    """2D pixel grid, row-major, row 0 at the top."""

    pixels: np.ndarray
    intensity_kind: str = LINE_INTEGRAL

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"image pixels must be 2D, got shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def _slab_intervals(origins, dirs, lo, hi):
    """Vectorized slab test. Returns (t_enter, t_exit, hit) per ray.

    t_enter is clipped to 0 so the interval is the intersection of the box
    with the forward ray; rays whose overlap lies entirely behind the origin
    count as misses.
    """
    zero = dirs == 0.0
    safe = np.where(zero, 1.0, dirs)
    t1 = (lo - origins) / safe
    t2 = (hi - origins) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    within = (origins >= lo) & (origins <= hi)
    tmin = np.where(zero, np.where(within, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(within, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_enter <= t_exit) & (t_exit >= 0.0)
    t_enter = np.maximum(t_enter, 0.0)
    return t_enter, t_exit, hit


def ray_aabb(origin, direction, box_min, box_max):
    """Slab-method ray / axis-aligned-box intersection.

    Returns (t_enter, t_exit) with 0 <= t_enter <= t_exit, or None when the
    forward ray misses the box. Raises on a zero direction.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if not np.any(direction != 0.0):
        raise ValueError("ray direction must be nonzero")
    origin = np.asarray(origin, dtype=np.float64)
    t_enter, t_exit, hit = _slab_intervals(
        origin[None, :], direction[None, :], np.asarray(box_min, dtype=np.float64), np.asarray(box_max, dtype=np.float64)
    )
    if not hit[0]:
        return None
    return float(t_enter[0]), float(t_exit[0])


def integrate_rays(v: Volume, origins: np.ndarray, dirs_unit: np.ndarray, step_mm: float) -> np.ndarray:
    """Midpoint-rule line integrals of attenuation along many rays at once.

    Each ray's chord [t_enter, t_exit] is split into n = ceil(length/step)
    equal sub-steps and sampled at sub-step midpoints. Rays that miss the
    volume integrate to 0.
    """
    if v.value_kind != ATTENUATION:
        raise ValueError("integration expects an attenuation volume")
    if step_mm <= 0:
        raise ValueError(f"step_mm must be positive, got {step_mm}")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs_unit = np.atleast_2d(np.asarray(dirs_unit, dtype=np.float64))
    lo, hi = v.bounds_mm
    t_enter, t_exit, hit = _slab_intervals(origins, dirs_unit, lo, hi)
    length = np.where(hit, t_exit - t_enter, 0.0)
    n = np.ceil(length / step_mm).astype(np.int64)
    h = np.where(n > 0, length / np.maximum(n, 1), 0.0)
    acc = np.zeros(origins.shape[0])
    for k in range(int(n.max()) if n.size else 0):
        t = t_enter + (k + 0.5) * h
        pts = origins + dirs_unit * t[:, None]
        vals = sample_trilinear_many(v, pts)
        acc = acc + np.where(k < n, vals * h, 0.0)
    return acc


def integrate_ray(v: Volume, origin, direction_unit, step_mm: float) -> float:
    """Line integral of attenuation along one ray; 0 when the ray misses."""
    return float(
        integrate_rays(
            v,
            np.asarray(origin, dtype=np.float64)[None, :],
            np.asarray(direction_unit, dtype=np.float64)[None, :],
            step_mm,
        )[0]
    )


def detector_basis(pose: ViewPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(view_dir, u_axis, v_axis) orthonormal detector frame for a pose."""
    d = pose.view_direction()
    u = np.cross(d, np.array([0.0, 0.0, 1.0]))
    nu = np.linalg.norm(u)
    if nu < 1e-12:
        u = np.array([0.0, 1.0, 0.0])  # pole view: pick a fixed horizontal
    else:
        u = u / nu
    vax = np.cross(u, d)
    vax = vax / np.linalg.norm(vax)
    return d, u, vax


def render_drr(v: Volume, pose: ViewPose, det: DetectorSpec, step_mm: float | None = None) -> Image:
    """Render a cone-beam DRR of the volume from a hemisphere pose.

    Returns raw line integrals (one Beer-Lambert integral per pixel); apply
    :func:`normalize_image` for display or dataset output. Default step is
    half the smallest voxel spacing.
    """
    if step_mm is None:
        step_mm = 0.5 * min(v.spacing_mm)
    src = pose.position_mm
    d, u, vax = detector_basis(pose)
    center = src + d * det.source_to_detector_mm

    cols = (np.arange(det.width_px) - (det.width_px - 1) / 2.0) * det.pixel_pitch_mm
    rows = ((det.height_px - 1) / 2.0 - np.arange(det.height_px)) * det.pixel_pitch_mm
    px = center[None, None, :] + cols[None, :, None] * u[None, None, :] + rows[:, None, None] * vax[None, None, :]

    dirs = px.reshape(-1, 3) - src[None, :]
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(src, dirs.shape)

    vals = integrate_rays(v, origins, dirs, step_mm)
    return Image(pixels=vals.reshape(det.height_px, det.width_px), intensity_kind=LINE_INTEGRAL)


MINMAX_LINE_INTEGRAL = "minmax_line_integral"


def normalize_image(img: Image, mode: str = MINMAX_LINE_INTEGRAL) -> Image:
    """Map an image into [0, 1].

    ``minmax_line_integral``: affine min-max of the raw values (a constant
    image maps to all 0.5). ``transmittance``: convert line integrals to
    film-like transmittance 1 - exp(-raw) first, then min-max.
    """
    p = img.pixels
    kind = img.intensity_kind
    if mode == TRANSMITTANCE:
        p = -np.expm1(-p)
        kind = TRANSMITTANCE
    elif mode != MINMAX_LINE_INTEGRAL:
        raise ValueError(f"unknown normalization mode {mode!r}")
    lo = p.min()
    hi = p.max()
    if hi == lo:
        out = np.full_like(p, 0.5)
    else:
        out = (p - lo) / (hi - lo)
    return Image(pixels=out, intensity_kind=kind)
