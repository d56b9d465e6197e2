"""Denoising-diffusion machinery: noise schedule, forward corruption, the
noise-prediction training loss, and deterministic DDIM sampling with
classifier-free guidance over the three conditioning regimes.

Convention: clean images live in [-1, 1]; ``sample`` returns [0, 1] RGB.
Schedule tables are float64 so the q_sample/predict_x0 algebra inverts to
tight tolerance; coefficients are cast to the image dtype at the point of
use so float32 training tensors stay float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, UsageError
from .rng import SeededRng
from .tensor import Tensor

REGIMES = ("C+P", "C", "P")
UNCOND_MODES = ("both", "prompt")


# --------------------------------------------------------------------------- #
# schedule
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep corruption tables: beta, alpha = 1 - beta, and the
    cumulative product alpha_bar that q_sample interpolates with."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        if not isinstance(timesteps, int) or timesteps < 2:
            raise ConfigError(f"schedule needs at least 2 timesteps, got {timesteps!r}")
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        if betas[0] <= 0.0 or betas[-1] >= 1.0:
            raise ConfigError(
                f"noise rates must lie in (0, 1), got range [{betas[0]}, {betas[-1]}]")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        sched = cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)
        sched.validate()
        return sched

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        if not (self.betas.shape == self.alphas.shape == self.alpha_bars.shape):
            raise ConfigError("schedule tables must share one length")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ConfigError("noise rates must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ConfigError("cumulative signal level must strictly decrease with t")
        if self.alpha_bars[0] <= 0.99:
            raise ConfigError(
                f"first-step signal level {self.alpha_bars[0]:.4f} too low; "
                "the earliest timestep must be nearly noise-free (> 0.99)")

    def alpha_bar(self, t) -> np.ndarray:
        """Look up alpha_bar for integer timestep(s) ``t`` in [0, T)."""
        ti = np.asarray(t)
        if ti.dtype.kind not in "iu":
            raise UsageError(f"timesteps must be integers, got dtype {ti.dtype}")
        if ti.size and (ti.min() < 0 or ti.max() >= self.timesteps):
            raise UsageError(
                f"timestep out of range [0, {self.timesteps}): {ti.min()}..{ti.max()}")
        return self.alpha_bars[ti]


def _broadcast_coef(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Shape per-example scalars (or one scalar) to multiply a batch array,
    cast to the array's dtype so float32 data is not silently promoted."""
    v = np.asarray(values, dtype=like.dtype)
    if v.ndim == 0:
        return v
    if v.shape[0] != like.shape[0]:
        raise ShapeError(
            f"per-example coefficients {v.shape} do not match batch {like.shape}")
    return v.reshape((v.shape[0],) + (1,) * (like.ndim - 1))


# --------------------------------------------------------------------------- #
# forward corruption and its inversion
# --------------------------------------------------------------------------- #


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Corrupt clean data to timestep t: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    return _broadcast_coef(np.sqrt(ab), x0) * x0 + _broadcast_coef(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(schedule: NoiseSchedule, z_t: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Invert q_sample given the (predicted) noise: (z_t - sqrt(1-ab)*eps)/sqrt(ab)."""
    z_t = np.asarray(z_t)
    eps = np.asarray(eps)
    if z_t.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {z_t.shape}")
    ab = schedule.alpha_bar(t)
    return (z_t - _broadcast_coef(np.sqrt(1.0 - ab), z_t) * eps) \
        / _broadcast_coef(np.sqrt(ab), z_t)


def training_loss(model, schedule: NoiseSchedule, x0: np.ndarray, t: np.ndarray,
                  eps: np.ndarray, cond, query=None) -> Tensor:
    """Noise-prediction MSE for one batch.

    The caller draws ``t`` (uniform over [0, T), one per example) and ``eps``
    (standard normal, shaped like ``x0``); keeping the draws outside makes the
    loss a pure function that tests can probe with known noise.
    """
    z_t = q_sample(schedule, x0, t, eps).astype(np.float32, copy=False)
    eps_hat = model.predict_noise(Tensor(z_t), t, cond, query=query)
    return ops.mse(eps_hat, np.asarray(eps, dtype=np.float32))


# --------------------------------------------------------------------------- #
# guidance and the DDIM update
# --------------------------------------------------------------------------- #


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Guided noise estimate eps_u + w*(eps_c - eps_u); exact at w in {0, 1}."""
    eps_uncond = np.asarray(eps_uncond)
    eps_cond = np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(
            f"guidance operands differ: {eps_uncond.shape} vs {eps_cond.shape}")
    w = float(w)
    if w == 0.0:
        return eps_uncond
    if w == 1.0:
        return eps_cond
    return eps_uncond + np.asarray(w, dtype=eps_uncond.dtype) * (eps_cond - eps_uncond)


def make_timestep_subsequence(timesteps: int, steps: int) -> np.ndarray:
    """Evenly strided sampling timesteps, descending from T-1.

    The stride is floor(T / steps), so the last entry is small but possibly
    nonzero; the sampling loop's final transition targets the fully denoised
    state (signal level 1) rather than timestep 0's table entry.
    """
    if not isinstance(steps, int) or steps < 1:
        raise UsageError(f"step count must be a positive int, got {steps!r}")
    if steps > timesteps:
        raise UsageError(f"cannot take {steps} sampling steps with only {timesteps} timesteps")
    stride = timesteps // steps
    return np.array([timesteps - 1 - i * stride for i in range(steps)], dtype=np.int64)


def ddim_step(schedule: NoiseSchedule, z_t: np.ndarray, eps_hat: np.ndarray,
              t: int, t_prev: int, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One DDIM transition z_t -> z_{t_prev}.

    ``t_prev = -1`` denotes the terminal transition to the fully denoised
    state (signal level exactly 1), where the update reduces to the clean
    estimate.  With eta=0 the step is deterministic and ``noise`` is unused.

    The clean estimate is clamped to the data range [-1, 1] before the
    update and the direction noise is recomputed from the clamped value.
    Near t = T the 1/sqrt(alpha_bar) factor amplifies small prediction
    errors into wild clean estimates; without the clamp those drive the
    state off the data manifold faster than later steps can recover.
    """
    t = int(t)
    t_prev = int(t_prev)
    if t_prev >= t:
        raise UsageError(f"DDIM must move toward less noise: t_prev {t_prev} >= t {t}")
    if t_prev < -1:
        raise UsageError(f"t_prev must be >= -1, got {t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise UsageError(f"eta must lie in [0, 1], got {eta}")
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bar(t_prev))
    x0 = np.clip(predict_x0(schedule, z_t, t, eps_hat), -1.0, 1.0)
    eps_dir = (z_t - np.asarray(np.sqrt(ab_t), dtype=z_t.dtype) * x0) \
        / np.asarray(np.sqrt(1.0 - ab_t), dtype=z_t.dtype)

    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    dir_coef = np.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = np.asarray(np.sqrt(ab_prev), dtype=z_t.dtype) * x0 \
        + np.asarray(dir_coef, dtype=z_t.dtype) * eps_dir
    if sigma > 0.0:
        if noise is None:
            raise UsageError("eta > 0 requires a noise draw")
        noise = np.asarray(noise)
        if noise.shape != z_t.shape:
            raise ShapeError(f"noise shape {noise.shape} != state shape {z_t.shape}")
        out = out + np.asarray(sigma, dtype=z_t.dtype) * noise
    return out


# --------------------------------------------------------------------------- #
# full sampling loop
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for the DDIM loop.  ``seed`` fixes the initial noise draw (and
    per-step noise when eta > 0), making eta=0 sampling fully deterministic."""

    steps: int = 50
    guidance_weight: float = 3.0
    eta: float = 0.0
    seed: int = 0

    def validate(self, timesteps: int) -> None:
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"steps must be a positive int, got {self.steps!r}")
        if self.steps > timesteps:
            raise ConfigError(f"steps {self.steps} exceeds schedule length {timesteps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not np.isfinite(self.guidance_weight):
            raise ConfigError(f"guidance weight must be finite, got {self.guidance_weight}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an int, got {self.seed!r}")


def _masked_inputs(prompts, context_sets, regime):
    """Apply the conditioning regime: context-only blanks the prompts,
    prompt-only blacks out the contexts (the encoder substitutes black
    images for an empty context list)."""
    if regime not in REGIMES:
        raise UsageError(f"regime must be one of {REGIMES}, got {regime!r}")
    if regime == "C":
        prompts = ["" for _ in prompts]
    if regime == "P":
        context_sets = [[] for _ in context_sets]
    return prompts, context_sets


def sample(model, schedule: NoiseSchedule, prompts, context_sets, query,
           sampler: SamplerConfig = SamplerConfig(), regime: str = "C+P",
           uncond: str = "both") -> np.ndarray:
    """Generate images with 50-step-style DDIM + classifier-free guidance.

    Args:
        model: exposes ``encode_conditioning`` and ``predict_noise``.
        prompts: one caption per example (masked to "" in the C regime).
        context_sets: per-example lists of [0,1] context images (masked to
            black in the P regime).
        query: layout-defining image(s) in [0,1], shaped (3,H,W) or
            (B,3,H,W), or None to run the backbone alone.
        uncond: what the guidance's unconditional pass strips — "both"
            drops prompt and context (query always kept), "prompt" drops
            only the prompt.

    Returns:
        (B, 3, H, W) float32 array in [0, 1].
    """
    if uncond not in UNCOND_MODES:
        raise UsageError(f"uncond must be one of {UNCOND_MODES}, got {uncond!r}")
    if len(prompts) != len(context_sets):
        raise UsageError(
            f"{len(prompts)} prompts vs {len(context_sets)} context sets")
    sampler.validate(schedule.timesteps)
    batch = len(prompts)
    cfg = model.cfg
    rng = SeededRng(sampler.seed)

    prompts, context_sets = _masked_inputs(prompts, context_sets, regime)
    cond_c = model.encode_conditioning(prompts, context_sets)
    w = float(sampler.guidance_weight)
    need_uncond = w != 1.0
    need_cond = w != 0.0
    cond_u = None
    if need_uncond:
        u_prompts = ["" for _ in prompts]
        u_contexts = [[] for _ in context_sets] if uncond == "both" else context_sets
        cond_u = model.encode_conditioning(u_prompts, u_contexts)

    z = rng.normal((batch, cfg.in_channels, cfg.image_size, cfg.image_size))
    seq = make_timestep_subsequence(schedule.timesteps, sampler.steps)
    for i, t in enumerate(seq):
        t_prev = int(seq[i + 1]) if i + 1 < len(seq) else -1
        tb = np.full((batch,), int(t), dtype=np.int64)
        eps_c = model.predict_noise(z, tb, cond_c, query=query).data if need_cond else None
        eps_u = model.predict_noise(z, tb, cond_u, query=query).data if need_uncond else None
        if eps_c is None:
            eps = eps_u
        elif eps_u is None:
            eps = eps_c
        else:
            eps = cfg_combine(eps_u, eps_c, w)
        step_noise = rng.normal(z.shape) if sampler.eta > 0.0 else None
        z = ddim_step(schedule, z, eps, int(t), t_prev, eta=sampler.eta, noise=step_noise)
    return ((np.clip(z, -1.0, 1.0) + 1.0) * 0.5).astype(np.float32)
