"""Dataset assembly, latent codec, and staged weak-to-strong training.

The latent codec is an exactly invertible stand-in for a learned VAE: a
space-to-depth rearrangement (factor^2 channels) followed by a fixed affine
standardization whose constants are computed once from the training images.
The affine is built so decode(encode(x)) is bitwise exact for float32-lattice
pixel values (which is what the image loader produces): the scale is a power
of two and the shift is float32-rounded, so every operation round-trips
without loss.

Training is plain AdamW on the epsilon-prediction objective, deterministic
given the stage seed: all randomness (batch indices, timesteps, noise,
condition dropout) is drawn from one generator in a fixed order.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from xraynvs.diffusion import ConditionBundle, NoiseSchedule, make_schedule, training_loss
from xraynvs.drr import DetectorSpec, MINMAX_LINE_INTEGRAL, render_drr, normalize_image
from xraynvs.imgio import load_png16, save_png16
from xraynvs.nn import interpolate_pos_embed
from xraynvs.nn.model import (
    ModelConfig,
    encode_condition,
    encode_condition_backward,
    init_params,
    vcdit_backward,
    vcdit_forward,
)
from xraynvs.viewgeom import ViewPose, fibonacci_hemisphere, relative_view_encoding
from xraynvs.voxel import hu_to_mu, make_phantom, save_volume

CODEC_FACTOR = 2

FRESH = "fresh"
FROM_CHECKPOINT = "from_checkpoint_with_pos_interp"


# ---------------------------------------------------------------------------
# latent codec


@dataclass(frozen=True)
class Codec:
    """Exact space-to-depth codec with a fixed affine standardization."""

    factor: int = CODEC_FACTOR
    shift: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, mean: float, std: float, factor: int = CODEC_FACTOR) -> "Codec":
        """Quantize dataset statistics so the affine inverts exactly:
        power-of-two scale, float32 shift."""
        shift = float(np.float32(mean))
        if std > 0 and math.isfinite(std):
            scale = 2.0 ** round(math.log2(std))
        else:
            scale = 1.0
        return cls(factor=factor, shift=shift, scale=scale)

    @property
    def channels(self) -> int:
        return self.factor * self.factor

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        """(H, W) or (B, H, W) image -> (f^2, H/f, W/f) latent (or batched)."""
        x = np.asarray(pixels, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        b, hh, ww = x.shape
        f = self.factor
        if hh % f or ww % f:
            raise ValueError(f"image side {(hh, ww)} not divisible by codec factor {f}")
        z = x.reshape(b, hh // f, f, ww // f, f).transpose(0, 2, 4, 1, 3).reshape(b, f * f, hh // f, ww // f)
        z = (z - self.shift) / self.scale
        return z[0] if single else z

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`encode`, exact for encoder outputs."""
        zz = np.asarray(z, dtype=np.float64)
        single = zz.ndim == 3
        if single:
            zz = zz[None]
        b, c, hh, ww = zz.shape
        f = self.factor
        if c != f * f:
            raise ValueError(f"latent has {c} channels, codec expects {f * f}")
        x = zz * self.scale + self.shift
        x = x.reshape(b, f, f, hh, ww).transpose(0, 3, 1, 4, 2).reshape(b, hh * f, ww * f)
        return x[0] if single else x


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ViewRecord:
    index: int
    azimuth_rad: float
    elevation_rad: float
    radius_m: float
    is_source: bool
    volume: str | None = None
    images: dict[str, str] = field(default_factory=dict)
    gt_path: str | None = None  # set by at_resolution()

    def pose(self) -> ViewPose:
        return ViewPose(self.azimuth_rad, self.elevation_rad, self.radius_m)

    def image_name(self) -> str:
        az = math.degrees(self.azimuth_rad)
        el = math.degrees(self.elevation_rad)
        return f"view{self.index:04d}_az{az:+.2f}_el{el:+.2f}.png"

    def gt_image_path(self) -> str:
        if self.gt_path is None:
            raise ValueError(f"view {self.index}: no resolution selected (use at_resolution)")
        return self.gt_path


@dataclass
class DatasetManifest:
    records: list[ViewRecord]
    volumes: list[str] = field(default_factory=list)
    resolutions: list[int] = field(default_factory=list)
    normalization: str = MINMAX_LINE_INTEGRAL
    seed: int | None = None
    latent_shift: float = 0.0
    latent_scale: float = 1.0
    root: str = "."

    def codec(self) -> Codec:
        return Codec(factor=CODEC_FACTOR, shift=self.latent_shift, scale=self.latent_scale)

    def views_of(self, volume: str) -> list[ViewRecord]:
        return [r for r in self.records if r.volume == volume]

    def at_resolution(self, resolution: int) -> "DatasetManifest":
        """Copy with each record's ground-truth path bound to one resolution."""
        key = str(resolution)
        recs = []
        for r in self.records:
            if key not in r.images:
                raise ValueError(f"view {r.index} of {r.volume}: no image at resolution {resolution}")
            recs.append(replace(r, gt_path=r.images[key]))
        return replace(self, records=recs)

    def without_pairs(self, pairs: set[tuple[str, int]]) -> "DatasetManifest":
        """Drop specific (volume, view index) records, e.g. to hold them out."""
        recs = [r for r in self.records if (r.volume, r.index) not in pairs]
        return replace(self, records=recs)


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    meta = {
        "kind": "meta",
        "volumes": manifest.volumes,
        "resolutions": manifest.resolutions,
        "normalization": manifest.normalization,
        "seed": manifest.seed,
        "latent_shift": manifest.latent_shift,
        "latent_scale": manifest.latent_scale,
    }
    with open(path, "w") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for r in manifest.records:
            row = {
                "kind": "view",
                "volume": r.volume,
                "index": r.index,
                "azimuth_rad": r.azimuth_rad,
                "elevation_rad": r.elevation_rad,
                "radius_m": r.radius_m,
                "is_source": r.is_source,
                "images": r.images,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path: str) -> DatasetManifest:
    records = []
    meta = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row.get("kind") == "meta":
                meta = row
            elif row.get("kind") == "view":
                records.append(
                    ViewRecord(
                        index=int(row["index"]),
                        azimuth_rad=float(row["azimuth_rad"]),
                        elevation_rad=float(row["elevation_rad"]),
                        radius_m=float(row["radius_m"]),
                        is_source=bool(row["is_source"]),
                        volume=row.get("volume"),
                        images=dict(row.get("images") or {}),
                    )
                )
            else:
                raise ValueError(f"{path}: unknown record kind {row.get('kind')!r}")
    if meta is None:
        raise ValueError(f"{path}: manifest has no meta record")
    return DatasetManifest(
        records=records,
        volumes=list(meta.get("volumes") or []),
        resolutions=[int(r) for r in (meta.get("resolutions") or [])],
        normalization=meta.get("normalization", MINMAX_LINE_INTEGRAL),
        seed=meta.get("seed"),
        latent_shift=float(meta.get("latent_shift", 0.0)),
        latent_scale=float(meta.get("latent_scale", 1.0)),
        root=os.path.dirname(os.path.abspath(path)),
    )


def manifest_from_poses(poses: list[ViewPose], source_index: int | None = 0) -> DatasetManifest:
    """Views-only manifest (no rendered images).

    ``source_index`` flags one pose as the source view (the hemisphere
    lattice's PA pole); pass None for view sets that exclude the source, such
    as the simple arc.
    """
    records = [
        ViewRecord(
            index=i,
            azimuth_rad=p.azimuth_rad,
            elevation_rad=p.elevation_rad,
            radius_m=p.radius_m,
            is_source=(i == source_index),
        )
        for i, p in enumerate(poses)
    ]
    return DatasetManifest(records=records)


# ---------------------------------------------------------------------------
# dataset build


def build_dataset(
    n_volumes: int,
    n_views: int,
    resolutions: list[int],
    radius_m: float,
    seed: int,
    out_dir: str,
    phantom_dims: tuple[int, int, int] = (48, 48, 48),
    normalization: str = MINMAX_LINE_INTEGRAL,
    step_mm: float | None = None,
    detector_size_mm: float = 300.0,
) -> DatasetManifest:
    """Phantoms -> hemisphere DRRs at each resolution -> PNGs + manifest.

    Deterministic in seed: volume i is make_phantom(seed + i). Each
    resolution is an independent render with the physical detector size held
    fixed. The manifest records the latent codec constants fitted to all
    rendered images.
    """
    if n_views < 2:
        raise ValueError("need at least a source view plus one target")
    resolutions = sorted(int(r) for r in resolutions)
    os.makedirs(out_dir, exist_ok=True)
    poses = fibonacci_hemisphere(n_views, radius_m)
    sdd = 2.0 * radius_m * 1000.0

    records: list[ViewRecord] = []
    volumes: list[str] = []
    total = 0.0
    total_sq = 0.0
    count = 0
    for vi in range(n_volumes):
        vol_id = f"vol{vi:03d}"
        volumes.append(vol_id)
        hu = make_phantom(seed + vi, phantom_dims)
        save_volume(hu, os.path.join(out_dir, vol_id))
        mu = hu_to_mu(hu)
        images_per_view: list[dict[str, str]] = [dict() for _ in range(n_views)]
        for res in resolutions:
            det = DetectorSpec.for_resolution(res, physical_size_mm=detector_size_mm, source_to_detector_mm=sdd)
            res_dir = os.path.join(out_dir, "images", vol_id, str(res))
            os.makedirs(res_dir, exist_ok=True)
            for i, pose in enumerate(poses):
                img = normalize_image(render_drr(mu, pose, det, step_mm=step_mm), mode=normalization)
                rec_stub = ViewRecord(i, pose.azimuth_rad, pose.elevation_rad, pose.radius_m, i == 0)
                rel = os.path.join("images", vol_id, str(res), rec_stub.image_name())
                save_png16(os.path.join(out_dir, rel), img)
                images_per_view[i][str(res)] = rel
                # accumulate codec statistics over loader-lattice values
                vals = load_png16(os.path.join(out_dir, rel))
                total += float(vals.sum())
                total_sq += float((vals * vals).sum())
                count += vals.size
        for i, pose in enumerate(poses):
            records.append(
                ViewRecord(
                    index=i,
                    azimuth_rad=pose.azimuth_rad,
                    elevation_rad=pose.elevation_rad,
                    radius_m=pose.radius_m,
                    is_source=(i == 0),
                    volume=vol_id,
                    images=images_per_view[i],
                )
            )

    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    codec = Codec.fit(mean, math.sqrt(var))
    manifest = DatasetManifest(
        records=records,
        volumes=volumes,
        resolutions=resolutions,
        normalization=normalization,
        seed=seed,
        latent_shift=codec.shift,
        latent_scale=codec.scale,
        root=os.path.abspath(out_dir),
    )
    write_manifest(os.path.join(out_dir, "dataset.manifest"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# training step: loss + exact gradients through conditioner and model


def diffusion_step_loss_and_grads(
    params: dict,
    cfg: ModelConfig,
    schedule: NoiseSchedule,
    src_pixels: np.ndarray,
    z0_target: np.ndarray,
    z_source: np.ndarray,
    view_encs: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    drop_mask: np.ndarray,
):
    """One batched epsilon-matching step: returns (loss, grads dict).

    drop_mask marks batch elements whose condition is replaced by the learned
    null bundle (tokens swapped for null_cond_tokens, source latent zeroed) --
    the classifier-free guidance training path.
    """
    b = z0_target.shape[0]
    ab = schedule.abar(np.asarray(t, dtype=np.int64))
    sq_ab = np.sqrt(ab)[:, None, None, None]
    sq_1m = np.sqrt(1.0 - ab)[:, None, None, None]
    z_t = sq_ab * z0_target + sq_1m * eps

    cond_enc, c_cond = encode_condition(params, cfg, src_pixels, view_encs, want_cache=True)
    m3 = drop_mask[:, None, None]
    m4 = drop_mask[:, None, None, None]
    cond = np.where(m3, params["null_cond_tokens"][None], cond_enc)
    z_src_eff = np.where(m4, 0.0, z_source)

    eps_hat, cache = vcdit_forward(params, cfg, z_t, z_src_eff, cond, np.asarray(t, dtype=np.float64), want_cache=True)
    loss = training_loss(eps_hat, eps)

    upstream = (2.0 / eps.size) * (eps_hat - eps)
    grads, input_grads = vcdit_backward(params, cfg, cache, upstream)
    dcond = input_grads["cond_tokens"]
    grads["null_cond_tokens"] = grads["null_cond_tokens"] + (dcond * m3).sum(axis=0)
    cond_grads = encode_condition_backward(c_cond, dcond * (1.0 - m3))
    for k, v in cond_grads.items():
        grads[k] = grads[k] + v
    return loss, grads


# ---------------------------------------------------------------------------
# AdamW


def adamw_init(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "step": 0,
    }


def adamw_update(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """In-place decoupled-weight-decay Adam step."""
    state["step"] += 1
    k = state["step"]
    bc1 = 1.0 - beta1**k
    bc2 = 1.0 - beta2**k
    for name in sorted(params):
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * params[name]
        params[name] = params[name] - lr * update


# ---------------------------------------------------------------------------
# stages


@dataclass(frozen=True)
class StageConfig:
    resolution: int
    grid: int
    steps: int
    batch_size: int
    learning_rate: float
    seed: int
    cond_dropout_prob: float = 0.1
    init: str = FRESH

    def __post_init__(self):
        if min(self.resolution, self.grid, self.batch_size) < 1 or self.steps < 0:
            raise ValueError("stage sizes must be positive (steps may be 0)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.cond_dropout_prob < 1.0:
            raise ValueError("cond_dropout_prob must lie in [0, 1)")
        if self.init not in (FRESH, FROM_CHECKPOINT):
            raise ValueError(f"unknown init mode {self.init!r}")


def model_config_for_stage(stage: StageConfig, model_fields: dict) -> ModelConfig:
    cfg = ModelConfig(grid=stage.grid, **model_fields)
    if stage.resolution != cfg.latent_side * CODEC_FACTOR:
        raise ValueError(
            f"stage resolution {stage.resolution} != grid*patch*codec "
            f"({cfg.grid}*{cfg.patch_size}*{CODEC_FACTOR})"
        )
    return cfg


def load_stage_file(path: str) -> tuple[dict, list[StageConfig]]:
    """Stage configuration file: {"model": {...}, "stages": [{...}, ...]}."""
    with open(path) as f:
        doc = json.load(f)
    if "model" not in doc or "stages" not in doc:
        raise ValueError(f"{path}: stage file needs 'model' and 'stages' sections")
    stages = [StageConfig(**s) for s in doc["stages"]]
    return dict(doc["model"]), stages


@dataclass
class TrainingBatchSource:
    """Preloaded (source, target) training pairs for one manifest resolution."""

    src_pixels: np.ndarray  # (n_volumes, S, S)
    z_src: np.ndarray  # (n_volumes, C, h, w)
    z0: np.ndarray  # (n_pairs, C, h, w)
    view_encs: np.ndarray  # (n_pairs, 4)
    vol_of_pair: np.ndarray  # (n_pairs,)
    pair_ids: list[tuple[str, int]]


def load_training_pairs(manifest: DatasetManifest, resolution: int, codec: Codec) -> TrainingBatchSource:
    """Load every (source view 0, target view) pair at one resolution."""
    key = str(resolution)
    src_px, z_src, z0, encs, vols, ids = [], [], [], [], [], []
    for vi, vol in enumerate(manifest.volumes):
        views = manifest.views_of(vol)
        if not views or not views[0].is_source or views[0].index != 0:
            raise ValueError(f"{vol}: manifest must start with source view 0")
        source = views[0]
        if key not in source.images:
            raise ValueError(f"{vol}: no images at resolution {resolution}")
        sp = load_png16(os.path.join(manifest.root, source.images[key]))
        src_px.append(sp)
        z_src.append(codec.encode(sp))
        for rec in views:
            if rec.is_source:
                continue
            tp = load_png16(os.path.join(manifest.root, rec.images[key]))
            z0.append(codec.encode(tp))
            encs.append(relative_view_encoding(source.pose(), rec.pose()))
            vols.append(vi)
            ids.append((vol, rec.index))
    if not z0:
        raise ValueError("manifest has no target views")
    return TrainingBatchSource(
        src_pixels=np.stack(src_px),
        z_src=np.stack(z_src),
        z0=np.stack(z0),
        view_encs=np.stack(encs),
        vol_of_pair=np.asarray(vols),
        pair_ids=ids,
    )


def train_stage(
    stage: StageConfig,
    manifest: DatasetManifest,
    model_fields: dict,
    params_in: dict | None = None,
    schedule: NoiseSchedule | None = None,
    trace_path: str | None = None,
    log_every: int = 50,
):
    """Run one training stage; returns (params, [(step, loss), ...]).

    Deterministic given the stage config and manifest. The loss trace holds
    every step; the CSV (when requested) is written at ``log_every``
    intervals plus the final step. A non-finite loss aborts with diagnostics.
    """
    cfg = model_config_for_stage(stage, model_fields)
    if stage.init == FROM_CHECKPOINT and params_in is None:
        raise ValueError("init=from_checkpoint_with_pos_interp requires params_in")
    if schedule is None:
        schedule = make_schedule()
    codec = manifest.codec()
    data = load_training_pairs(manifest, stage.resolution, codec)

    params = {k: np.array(v, copy=True) for k, v in (params_in or init_params(cfg, stage.seed)).items()}
    trace: list[tuple[int, float]] = []
    if stage.steps == 0:
        return params, trace

    rng = np.random.default_rng(stage.seed)
    opt = adamw_init(params)
    n_pairs = len(data.pair_ids)
    for step in range(1, stage.steps + 1):
        idx = rng.integers(0, n_pairs, size=stage.batch_size)
        t = rng.integers(1, schedule.T + 1, size=stage.batch_size)
        eps = rng.standard_normal((stage.batch_size, cfg.latent_channels, cfg.latent_side, cfg.latent_side))
        drop = rng.random(stage.batch_size) < stage.cond_dropout_prob

        vols = data.vol_of_pair[idx]
        loss, grads = diffusion_step_loss_and_grads(
            params,
            cfg,
            schedule,
            data.src_pixels[vols],
            data.z0[idx],
            data.z_src[vols],
            data.view_encs[idx],
            t,
            eps,
            drop,
        )
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at step {step} (seed {stage.seed})")
        adamw_update(params, grads, opt, stage.learning_rate)
        trace.append((step, loss))

    if trace_path:
        with open(trace_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for step, loss in trace:
                if step % log_every == 0 or step == stage.steps:
                    w.writerow([step, repr(loss)])
    return params, trace


def weak_to_strong_init(params_lr: dict, cfg_lr: ModelConfig, grid_hr: int) -> tuple[dict, ModelConfig]:
    """Transfer a low-resolution checkpoint to a higher grid.

    Every parameter is copied unchanged except the positional table, which is
    bilinearly interpolated to the new grid (align-corners). All other shapes
    are resolution-independent by construction.
    """
    if grid_hr < cfg_lr.grid:
        raise ValueError(f"target grid {grid_hr} smaller than source grid {cfg_lr.grid}")
    cfg_hr = replace(cfg_lr, grid=grid_hr)
    params_hr = {k: np.array(v, copy=True) for k, v in params_lr.items()}
    params_hr["pos_embed"] = interpolate_pos_embed(params_lr["pos_embed"], grid_hr)
    return params_hr, cfg_hr


def make_condition_bundle(params, cfg: ModelConfig, codec: Codec, source_pixels, view_encoding) -> ConditionBundle:
    """Assemble the sampler's conditioning from a source image and view delta."""
    tokens = encode_condition(params, cfg, source_pixels, view_encoding)
    return ConditionBundle(cond_tokens=tokens, source_latent=codec.encode(source_pixels))


def evaluate_loss(
    params: dict,
    cfg: ModelConfig,
    schedule: NoiseSchedule,
    data: TrainingBatchSource,
    batch_size: int,
    n_batches: int,
    seed: int,
) -> float:
    """Mean epsilon-matching loss over fixed seeded batches (no dropout)."""
    rng = np.random.default_rng(seed)
    n_pairs = len(data.pair_ids)
    total = 0.0
    for _ in range(n_batches):
        idx = rng.integers(0, n_pairs, size=batch_size)
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, cfg.latent_channels, cfg.latent_side, cfg.latent_side))
        vols = data.vol_of_pair[idx]
        ab = schedule.abar(t)
        z_t = np.sqrt(ab)[:, None, None, None] * data.z0[idx] + np.sqrt(1 - ab)[:, None, None, None] * eps
        cond = encode_condition(params, cfg, data.src_pixels[vols], data.view_encs[idx])
        eps_hat = vcdit_forward(params, cfg, z_t, data.z_src[vols], cond, t.astype(np.float64))
        total += training_loss(eps_hat, eps)
    return total / n_batches
