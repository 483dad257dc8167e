"""Diffusion process numerics.

Discrete-time variance-preserving diffusion with epsilon prediction:
``z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`` for integer timesteps
t in 1..T, with ``abar_0 = 1`` defined as the noise-free boundary. Latents
are plain float arrays of shape (channels, height, width); nothing here
depends on the denoiser's internals, which are passed in as a callable
``denoiser(z, cond, t) -> eps_hat``.

Reverse samplers: stochastic/deterministic DDIM steps and a deterministic
DPM-Solver ODE integrator in half-log-SNR (order 1 reproduces eta=0 DDIM
exactly; order 2 adds a midpoint correction). Classifier-free guidance is
applied inside the sampler by running the denoiser twice per step, once with
the condition bundle flagged null.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

LINEAR = "linear"
SCALED_LINEAR = "scaled_linear"

# defaults inherited from the standard latent-diffusion lineage
DEFAULT_T = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta / alpha-bar tables, 1-indexed via :meth:`abar`."""

    kind: str
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t):
        """alpha-bar at integer timestep(s) t in 0..T, with abar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}")
        table = np.concatenate([[1.0], self.alpha_bar])
        out = table[t.astype(np.int64)]
        return float(out) if np.isscalar(t) or t.ndim == 0 else out

    def lam(self, t) -> float:
        """Half-log-SNR lambda_t = 0.5 log(abar / (1 - abar)) at integer t >= 1."""
        ab = self.abar(t)
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    def abar_continuous(self, t: float) -> float:
        """alpha-bar at fractional t via linear interpolation of lambda(t).

        Used by the order-2 solver's midpoints and by analytic test denoisers;
        exact at integer t.
        """
        if t < 1.0 or t > self.T:
            raise ValueError(f"fractional timestep out of range 1..{self.T}, got {t}")
        grid = np.arange(1, self.T + 1, dtype=np.float64)
        lam_grid = 0.5 * (np.log(self.alpha_bar) - np.log1p(-self.alpha_bar))
        lam_t = float(np.interp(t, grid, lam_grid))
        return 1.0 / (1.0 + math.exp(-2.0 * lam_t))

    def t_of_lambda(self, lam: float) -> float:
        """Inverse of lambda(t) by linear interpolation; lambda decreases in t."""
        grid = np.arange(1, self.T + 1, dtype=np.float64)
        lam_grid = 0.5 * (np.log(self.alpha_bar) - np.log1p(-self.alpha_bar))
        # np.interp needs ascending x: lambda is descending in t
        return float(np.interp(lam, lam_grid[::-1], grid[::-1]))


def make_schedule(
    kind: str = SCALED_LINEAR,
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a beta schedule and its cumulative-product alpha-bar table.

    ``linear``: beta_t linear in t. ``scaled_linear``: sqrt(beta_t) linear in
    t (the stable-diffusion convention).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == LINEAR:
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == SCALED_LINEAR:
        beta = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(kind=kind, beta=beta, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class ConditionBundle:
    """Everything the denoiser consumes besides the noised latent.

    cond_tokens: (n_tokens, cond_dim) pre-projection condition vectors
    (source-image embedding tokens plus the relative-view token).
    source_latent: encoded source image, channel-concatenated by the model.
    null_flag: when True the denoiser must substitute its learned null
    condition (classifier-free unconditional pass).
    """

    cond_tokens: np.ndarray
    source_latent: np.ndarray
    null_flag: bool = False

    def as_null(self) -> "ConditionBundle":
        return replace(self, null_flag=True)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Forward-noise z0 to timestep t with the given unit-normal draw."""
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"shape mismatch: z0 {np.shape(z0)} vs eps {np.shape(eps)}")
    if not 1 <= t <= s.T:
        raise ValueError(f"t must lie in 1..{s.T}, got {t}")
    ab = s.abar(int(t))
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def training_loss(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error over all elements (resolution-comparable)."""
    if np.shape(eps_hat) != np.shape(eps):
        raise ValueError(f"shape mismatch: {np.shape(eps_hat)} vs {np.shape(eps)}")
    d = eps_hat - eps
    return float(np.mean(d * d))


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond).

    scale 0 and 1 return exact copies of the unconditional / conditional
    predictions respectively.
    """
    if np.shape(eps_uncond) != np.shape(eps_cond):
        raise ValueError("shape mismatch between guidance branches")
    if scale == 0.0:
        return np.array(eps_uncond, copy=True)
    if scale == 1.0:
        return np.array(eps_cond, copy=True)
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    eta: float,
    s: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One DDIM update from timestep t down to t_prev (t_prev = 0 allowed).

    eta = 0 is the deterministic sampler; eta > 0 injects fresh noise drawn
    from the passed generator.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got {t_prev} >= {t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ab_t = s.abar(int(t))
    ab_prev = s.abar(int(t_prev))
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if eta == 0.0:
        sigma = 0.0
    else:
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    out = math.sqrt(ab_prev) * z0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an explicit random generator")
        out = out + sigma * rng.standard_normal(z_t.shape)
    return out


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Integer grid from T down to 1, spaced uniformly in t (steps+1 nodes)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    ts = np.round(np.linspace(T, 1, steps + 1)).astype(np.int64)
    if np.any(np.diff(ts) >= 0):
        raise ValueError(f"steps={steps} too fine for T={T}: grid not strictly decreasing")
    return ts


def _guided_eps(denoiser, z, cond, t, scale):
    if cond is None:
        return denoiser(z, None, t)
    e_cond = denoiser(z, cond, t)
    if scale == 1.0:
        return e_cond
    e_uncond = denoiser(z, cond.as_null(), t)
    return cfg_combine(e_uncond, e_cond, scale)


def dpm_solver_sample(
    denoiser,
    z_T: np.ndarray,
    cond: ConditionBundle | None,
    steps: int,
    scale: float,
    s: NoiseSchedule,
    order: int = 2,
    return_trajectory: bool = False,
):
    """Deterministic DPM-Solver sampling from z_T over a uniform t grid.

    The exponential-integrator update is taken in half-log-SNR lambda. With
    order=1 each step is algebraically the eta=0 DDIM update; order=2
    evaluates the denoiser a second time at the lambda-midpoint of each step.
    The trajectory ends at t=1.
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    ts = sampling_timesteps(s.T, steps)
    z = np.array(z_T, copy=True)
    trajectory = [np.array(z, copy=True)]
    for i in range(steps):
        t_cur, t_nxt = int(ts[i]), int(ts[i + 1])
        ab_cur, ab_nxt = s.abar(t_cur), s.abar(t_nxt)
        a_cur, a_nxt = math.sqrt(ab_cur), math.sqrt(ab_nxt)
        s_cur, s_nxt = math.sqrt(1.0 - ab_cur), math.sqrt(1.0 - ab_nxt)
        lam_cur = math.log(a_cur / s_cur)
        lam_nxt = math.log(a_nxt / s_nxt)
        h = lam_nxt - lam_cur
        eps_cur = _guided_eps(denoiser, z, cond, t_cur, scale)
        if order == 1:
            z = (a_nxt / a_cur) * z - s_nxt * math.expm1(h) * eps_cur
        else:
            lam_mid = lam_cur + 0.5 * h
            ab_mid = 1.0 / (1.0 + math.exp(-2.0 * lam_mid))
            a_mid, s_mid = math.sqrt(ab_mid), math.sqrt(1.0 - ab_mid)
            t_mid = s.t_of_lambda(lam_mid)
            z_mid = (a_mid / a_cur) * z - s_mid * math.expm1(0.5 * h) * eps_cur
            eps_mid = _guided_eps(denoiser, z_mid, cond, t_mid, scale)
            z = (a_nxt / a_cur) * z - s_nxt * math.expm1(h) * eps_mid
        trajectory.append(np.array(z, copy=True))
    if return_trajectory:
        return z, trajectory
    return z


def ddim_sample(
    denoiser,
    z_T: np.ndarray,
    cond: ConditionBundle | None,
    steps: int,
    scale: float,
    s: NoiseSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    return_trajectory: bool = False,
):
    """DDIM sampling loop over the same uniform timestep grid as DPM-Solver."""
    ts = sampling_timesteps(s.T, steps)
    z = np.array(z_T, copy=True)
    trajectory = [np.array(z, copy=True)]
    for i in range(steps):
        t_cur, t_nxt = int(ts[i]), int(ts[i + 1])
        eps_cur = _guided_eps(denoiser, z, cond, t_cur, scale)
        z = ddim_step(z, eps_cur, t_cur, t_nxt, eta, s, rng=rng)
        trajectory.append(np.array(z, copy=True))
    if return_trajectory:
        return z, trajectory
    return z
