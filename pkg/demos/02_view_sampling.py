"""Hemisphere view sampling and the relative view encoding.

Shows the Fibonacci lattice used for dataset views (pose 0 is the PA source
view), the simple +/-90 degree evaluation arc, and the 4-vector relative
encoding that conditions generation.
"""

import math

import numpy as np

from xraynvs.viewgeom import (
    fibonacci_hemisphere,
    pa_pose,
    relative_view_encoding,
    simple_arc_views,
)

# -- Fibonacci lattice at the radius used throughout: 1.8 m ------------------
poses = fibonacci_hemisphere(1500, 1.8)
pts = np.stack([p.position_m for p in poses])
print(f"lattice: {len(poses)} poses, first = PA pole at {np.round(pts[0], 6)}")

unit = pts / np.linalg.norm(pts, axis=1, keepdims=True)
ang = np.arccos(np.clip(unit @ unit.T, -1, 1))
np.fill_diagonal(ang, np.inf)
nn = ang.min(axis=1) * 1.8
print(f"nearest-neighbor geodesic spacing: mean {nn.mean()*1000:.1f} mm, "
      f"CV {nn.std()/nn.mean():.3f} (uniformity)")

# -- the evaluation arc: a CT-style rotation through the PA view -------------
arc = simple_arc_views(5.0)
print(f"\narc at 5 deg steps: {len(arc)} poses (0 deg excluded: that is the source)")
for pose in arc[::9]:
    x, y, z = pose.position_m
    print(f"  position ({x:+.2f}, {y:+.2f}, {z:+.2f}) m")

# -- relative view encoding ---------------------------------------------------
pa = pa_pose(1.8)
print("\nrelative encodings from the PA source:")
for pose in arc[:3] + arc[-3:]:
    enc = relative_view_encoding(pa, pose)
    print(f"  az {math.degrees(pose.azimuth_rad):6.1f} el {math.degrees(pose.elevation_rad):5.1f}"
          f" -> (d_el {enc[0]:+.3f}, sin {enc[1]:+.3f}, cos {enc[2]:+.3f}, d_r {enc[3]:+.3f})")
print("identity check:", relative_view_encoding(pa, pa))
