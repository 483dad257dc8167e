"""Desk-scale single-view X-ray novel view synthesis toolkit.

Pipeline pieces, bottom to top:

- :mod:`xraynvs.voxel`     -- CT-like volumes, procedural phantoms, trilinear sampling
- :mod:`xraynvs.viewgeom`  -- hemisphere view sampling and relative view encoding
- :mod:`xraynvs.drr`       -- cone-beam digitally reconstructed radiograph rendering
- :mod:`xraynvs.diffusion` -- noise schedules, forward noising, DDIM / DPM-Solver samplers
- :mod:`xraynvs.nn`        -- view-conditioned diffusion transformer (numpy forward + analytic backward)
- :mod:`xraynvs.train`     -- dataset assembly, latent codec, staged weak-to-strong training
- :mod:`xraynvs.metrics`   -- PSNR / SSIM evaluation
- :mod:`xraynvs.cli`       -- command-line orchestration
"""

__version__ = "0.1.0"

from xraynvs.voxel import Volume, load_volume, save_volume, hu_to_mu, make_phantom, sample_trilinear
from xraynvs.viewgeom import (
    ViewPose,
    fibonacci_hemisphere,
    simple_arc_views,
    relative_view_encoding,
    pose_from_angles,
)
from xraynvs.drr import DetectorSpec, Image, ray_aabb, integrate_ray, render_drr, normalize_image
from xraynvs.diffusion import (
    NoiseSchedule,
    ConditionBundle,
    make_schedule,
    q_sample,
    training_loss,
    cfg_combine,
    ddim_step,
    dpm_solver_sample,
)
from xraynvs.metrics import psnr, ssim
