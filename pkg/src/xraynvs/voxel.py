"""Volumes, procedural phantoms, and attenuation-space sampling.

A :class:`Volume` is a 3D scalar field on a regular grid. Values are either
CT numbers (``hounsfield``) or linear attenuation coefficients per millimetre
(``attenuation_per_mm``). World coordinates are millimetres; voxel centers sit
at ``origin_mm + index * spacing_mm``, so the field's support is the bounding
box of the voxel centers. Samples outside that box are defined to be 0 (air).

Native storage is a raw little-endian float32 file (x-fastest order) plus a
JSON sidecar ``<name>.vol.json`` carrying dims / spacing / origin / value kind.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

HOUNSFIELD = "hounsfield"
ATTENUATION = "attenuation_per_mm"

# HU -> mu conversion default: water attenuation at ~60-70 keV effective energy.
MU_WATER_PER_MM = 0.02

# Phantoms occupy a fixed physical extent regardless of voxel count, so the
# same scene renders consistently at any sampling resolution.
PHANTOM_EXTENT_MM = 128.0


@dataclass
class Volume:
    """Regular-grid scalar volume with world-space metadata.

    data is indexed ``[ix, iy, iz]`` and kept float32 (the file dtype);
    interpolation arithmetic is done in float64.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]
    value_kind: str = HOUNSFIELD

    def __post_init__(self):
        self.data = np.asfortranarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(n < 2 for n in self.data.shape):
            raise ValueError(f"volume dims must all be >= 2, got {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        if self.value_kind not in (HOUNSFIELD, ATTENUATION):
            raise ValueError(f"unknown value_kind {self.value_kind!r}")
        if self.value_kind == ATTENUATION and np.any(self.data < 0):
            raise ValueError("attenuation volumes must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """(lower, upper) corners of the voxel-center bounding box."""
        lo = np.asarray(self.origin_mm, dtype=np.float64)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)
        return lo, hi


def save_volume(v: Volume, path: str) -> str:
    """Write ``<path>.vol.json`` sidecar plus a raw float32 data file.

    ``path`` may be given with or without the ``.vol.json`` suffix. Returns the
    sidecar path.
    """
    sidecar = path if path.endswith(".vol.json") else path + ".vol.json"
    data_file = sidecar[: -len(".vol.json")] + ".raw"
    v.data.astype("<f4").ravel(order="F").tofile(data_file)
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "value_kind": v.value_kind,
        "data_file": os.path.basename(data_file),
    }
    with open(sidecar, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return sidecar


def load_volume(path: str) -> Volume:
    """Load a volume from its sidecar (or a path missing the suffix).

    Raises FileNotFoundError for a missing sidecar/data file and ValueError
    when the raw file length disagrees with the sidecar dims.
    """
    sidecar = path if path.endswith(".vol.json") else path + ".vol.json"
    if not os.path.exists(sidecar):
        raise FileNotFoundError(f"missing volume sidecar: {sidecar}")
    with open(sidecar) as f:
        meta = json.load(f)
    for key in ("dims", "spacing_mm", "origin_mm", "data_file"):
        if key not in meta:
            raise ValueError(f"sidecar {sidecar} missing key {key!r}")
    dims = tuple(int(n) for n in meta["dims"])
    data_file = os.path.join(os.path.dirname(sidecar), meta["data_file"])
    if not os.path.exists(data_file):
        raise FileNotFoundError(f"missing volume data file: {data_file}")
    raw = np.fromfile(data_file, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise ValueError(
            f"data length mismatch: sidecar dims {dims} need {expected} values, file has {raw.size}"
        )
    data = raw.reshape(dims, order="F")
    return Volume(
        data=data,
        spacing_mm=tuple(meta["spacing_mm"]),
        origin_mm=tuple(meta["origin_mm"]),
        value_kind=meta.get("value_kind", HOUNSFIELD),
    )


def hu_to_mu(v: Volume, mu_water_per_mm: float = MU_WATER_PER_MM) -> Volume:
    """Convert Hounsfield units to linear attenuation per mm.

    mu = mu_water * (1 + HU/1000), clamped below at zero so air (-1000 HU and
    beyond) contributes nothing to line integrals.
    """
    if v.value_kind != HOUNSFIELD:
        raise ValueError("hu_to_mu expects a hounsfield volume")
    if mu_water_per_mm <= 0:
        raise ValueError("mu_water_per_mm must be positive")
    hu = v.data.astype(np.float64)
    mu = np.maximum(mu_water_per_mm * (1.0 + hu / 1000.0), 0.0)
    return Volume(
        data=mu.astype(np.float32),
        spacing_mm=v.spacing_mm,
        origin_mm=v.origin_mm,
        value_kind=ATTENUATION,
    )


def sample_trilinear_many(v: Volume, points_mm: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of attenuation at world points, shape (M, 3).

    Points outside the voxel-center bounding box return exactly 0.
    """
    if v.value_kind != ATTENUATION:
        raise ValueError("sampling expects an attenuation volume")
    pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
    origin = np.asarray(v.origin_mm, dtype=np.float64)
    spacing = np.asarray(v.spacing_mm, dtype=np.float64)
    dims = np.asarray(v.dims)

    g = (pts - origin) / spacing  # fractional voxel index
    inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)

    i0 = np.clip(np.floor(g).astype(np.int64), 0, dims - 2)
    f = g - i0
    # clamp the fraction too: points exactly on the upper face get f == 1
    f = np.clip(f, 0.0, 1.0)

    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    d = v.data

    c000 = d[ix, iy, iz].astype(np.float64)
    c100 = d[ix + 1, iy, iz].astype(np.float64)
    c010 = d[ix, iy + 1, iz].astype(np.float64)
    c110 = d[ix + 1, iy + 1, iz].astype(np.float64)
    c001 = d[ix, iy, iz + 1].astype(np.float64)
    c101 = d[ix + 1, iy, iz + 1].astype(np.float64)
    c011 = d[ix, iy + 1, iz + 1].astype(np.float64)
    c111 = d[ix + 1, iy + 1, iz + 1].astype(np.float64)

    wx0, wx1 = 1.0 - fx, fx
    wy0, wy1 = 1.0 - fy, fy
    wz0, wz1 = 1.0 - fz, fz

    out = (
        c000 * wx0 * wy0 * wz0
        + c100 * wx1 * wy0 * wz0
        + c010 * wx0 * wy1 * wz0
        + c110 * wx1 * wy1 * wz0
        + c001 * wx0 * wy0 * wz1
        + c101 * wx1 * wy0 * wz1
        + c011 * wx0 * wy1 * wz1
        + c111 * wx1 * wy1 * wz1
    )
    out[~inside] = 0.0
    return out


def sample_trilinear(v: Volume, point_mm) -> float:
    """Trilinear sample at one world point; 0 outside the volume bounds."""
    return float(sample_trilinear_many(v, np.asarray(point_mm, dtype=np.float64)[None, :])[0])


def make_phantom(seed: int, dims: tuple[int, int, int] = (48, 48, 48)) -> Volume:
    """Deterministic procedural chest-like phantom in Hounsfield units.

    A soft-tissue ellipsoid "torso" (0 HU) sits on an air background
    (-1000 HU) and contains 2-6 internal ellipsoids, each either air-like
    (-800 HU) or bone-like (+700 HU). The volume is centered on the world
    origin and always spans ``PHANTOM_EXTENT_MM`` per axis, so voxel count
    controls sampling resolution only.
    """
    dims = tuple(int(n) for n in dims)
    if any(n < 8 for n in dims):
        raise ValueError(f"phantom dims must all be >= 8, got {dims}")
    rng = np.random.default_rng(seed)

    spacing = tuple(PHANTOM_EXTENT_MM / (n - 1) for n in dims)
    origin = tuple(-PHANTOM_EXTENT_MM / 2 for _ in dims)

    # world coordinates of voxel centers
    axes = [np.linspace(-PHANTOM_EXTENT_MM / 2, PHANTOM_EXTENT_MM / 2, n) for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")

    hu = np.full(dims, -1000.0)

    # torso: axis-aligned ellipsoid with mild per-seed shape jitter
    half = PHANTOM_EXTENT_MM / 2
    torso_semi = half * rng.uniform(0.60, 0.80, size=3)
    torso = (x / torso_semi[0]) ** 2 + (y / torso_semi[1]) ** 2 + (z / torso_semi[2]) ** 2 <= 1.0
    hu[torso] = 0.0

    n_inner = int(rng.integers(2, 7))
    for _ in range(n_inner):
        value = -800.0 if rng.random() < 0.5 else 700.0
        center = rng.uniform(-0.45, 0.45, size=3) * torso_semi
        semi = half * rng.uniform(0.08, 0.22, size=3)
        inner = ((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + (
            (z - center[2]) / semi[2]
        ) ** 2 <= 1.0
        hu[inner & torso] = value

    return Volume(
        data=hu.astype(np.float32),
        spacing_mm=spacing,
        origin_mm=origin,
        value_kind=HOUNSFIELD,
    )
