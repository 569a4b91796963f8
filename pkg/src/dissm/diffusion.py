"""Gaussian diffusion: noise schedule, forward noising, hybrid loss and DDPM sampling.

Sampler arithmetic is carried out in float64 numpy; the network sees inputs
cast to its own dtype. The variance head output ``v`` in ``[-1, 1]`` is mapped
to ``frac = (v + 1) / 2`` and the reverse-step log variance interpolates
``frac * log(beta_t) + (1 - frac) * log(posterior_variance_t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear_beta_schedule(T_steps: int = 1000, beta_1: float = 1e-4, beta_T: float = 2e-2) -> "NoiseSchedule":
    if T_steps < 1:
        raise ValueError("need at least one diffusion step")
    if not 0 < beta_1 < beta_T < 1:
        raise ValueError(f"invalid beta range [{beta_1}, {beta_T}]")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T_steps, dtype=np.float64))


@dataclass
class NoiseSchedule:
    """Per-step tables derived from ``betas`` (all float64).

    ``timestep_map[i]`` is the original timestep fed to the network for
    schedule index ``i``; it is the identity unless the schedule was respaced.
    """

    betas: np.ndarray
    timestep_map: np.ndarray | None = None
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    alpha_bars_prev: np.ndarray = field(init=False, repr=False)
    posterior_variance: np.ndarray = field(init=False, repr=False)
    posterior_log_variance: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef1: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        self.betas = b
        if self.timestep_map is None:
            self.timestep_map = np.arange(b.size)
        self.alphas = 1.0 - b
        self.alpha_bars = np.cumprod(self.alphas)
        self.alpha_bars_prev = np.append(1.0, self.alpha_bars[:-1])
        self.posterior_variance = b * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        # first entry is 0; reuse the second so the log stays finite
        pv = self.posterior_variance
        self.posterior_log_variance = np.log(np.append(pv[1], pv[1:]) if b.size > 1 else b)
        self.posterior_mean_coef1 = b * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_mean_coef2 = (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)

    @property
    def num_steps(self) -> int:
        return self.betas.size

    def respace(self, num_steps: int) -> "NoiseSchedule":
        """Schedule over ``num_steps`` evenly spaced original timesteps (including 0).

        Betas are recomputed so the cumulative products at the kept timesteps
        are unchanged. Keeping every step returns an identical schedule.
        """
        if not 1 <= num_steps <= self.num_steps:
            raise ValueError(f"num_steps must be in [1, {self.num_steps}]")
        if num_steps == self.num_steps:
            return NoiseSchedule(self.betas.copy(), self.timestep_map.copy())
        keep = respaced_timesteps(self.num_steps, num_steps)
        ab = self.alpha_bars[keep]
        prev = np.append(1.0, ab[:-1])
        return NoiseSchedule(1.0 - ab / prev, self.timestep_map[keep])

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.num_steps):
            raise ValueError(f"timestep outside [0, {self.num_steps})")
        return t


def respaced_timesteps(T_steps: int, num_steps: int) -> np.ndarray:
    """``num_steps`` strictly increasing indices spread evenly over ``[0, T-1]``."""
    if num_steps == 1:
        return np.array([T_steps - 1])
    idx = np.round(np.linspace(0, T_steps - 1, num_steps)).astype(np.int64)
    if np.any(np.diff(idx) <= 0):
        raise ValueError("respaced timesteps are not strictly increasing")
    return idx


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one timestep per leading-axis sample.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t = schedule._check(t)
    ab = schedule.alpha_bars[t]
    return _bcast(np.sqrt(ab), x0.ndim) * x0 + _bcast(np.sqrt(1.0 - ab), x0.ndim) * eps


def q_step(x_prev, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """One forward Markov transition ``sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z``."""
    t = schedule._check(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    return (_bcast(np.sqrt(schedule.alphas[t]), x_prev.ndim) * x_prev
            + _bcast(np.sqrt(schedule.betas[t]), x_prev.ndim) * np.asarray(noise))


def predict_x0(x_t: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = _bcast(schedule.alpha_bars[t], x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def posterior_mean(x0: np.ndarray, x_t: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    nd = x_t.ndim
    return (_bcast(schedule.posterior_mean_coef1[t], nd) * x0
            + _bcast(schedule.posterior_mean_coef2[t], nd) * x_t)


def model_log_variance(v, t, schedule: NoiseSchedule):
    """Interpolated log variance; ``v`` may be a Tensor (for the loss) or an array."""
    nd = v.ndim
    max_log = _bcast(np.log(schedule.betas[t]), nd)
    min_log = _bcast(schedule.posterior_log_variance[t], nd)
    if isinstance(v, Tensor):
        frac = (v + 1.0) * 0.5
        return frac * max_log.astype(v.dtype) + (1.0 - frac) * min_log.astype(v.dtype)
    frac = (np.asarray(v, dtype=np.float64) + 1.0) / 2.0
    return frac * max_log + (1.0 - frac) * min_log


# ---------------------------------------------------------------------------
# training objective


class LossOutput(NamedTuple):
    loss: Tensor
    loss_simple: float
    loss_vlb: float
    t: np.ndarray


def _approx_std_normal_cdf(x: Tensor) -> Tensor:
    return 0.5 * (1.0 + T.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _gaussian_kl_to_model(mean_true, logvar_true, mean_model, logvar_model: Tensor) -> Tensor:
    """KL(N(mean_true, e^logvar_true) || N(mean_model, e^logvar_model)), elementwise."""
    dt = logvar_model.dtype
    const = T.tensor((logvar_true).astype(dt))
    sq = T.tensor(((mean_true - mean_model) ** 2).astype(dt))
    return 0.5 * (-1.0 + logvar_model - const + T.exp(const - logvar_model) + sq * T.exp(-logvar_model))


def _discretized_nll(x0: np.ndarray, mean: np.ndarray, log_scale: Tensor) -> Tensor:
    """-log p(x0) under a Gaussian discretised to 256 bins on [-1, 1], elementwise."""
    dt = log_scale.dtype
    centered = (x0 - mean).astype(dt)
    inv_std = T.exp(-log_scale)
    cdf_plus = _approx_std_normal_cdf(inv_std * T.tensor(centered + 1.0 / 255.0))
    cdf_min = _approx_std_normal_cdf(inv_std * T.tensor(centered - 1.0 / 255.0))
    log_cdf_plus = T.log(T.clamp_min(cdf_plus, 1e-12))
    log_one_minus_cdf_min = T.log(T.clamp_min(1.0 - cdf_min, 1e-12))
    log_delta = T.log(T.clamp_min(cdf_plus - cdf_min, 1e-12))
    low = (x0 < -0.999).astype(dt)
    high = (x0 > 0.999).astype(dt)
    mid = 1.0 - low - high
    return -(log_cdf_plus * low + log_one_minus_cdf_min * high + log_delta * mid)


def vlb_terms(x0: np.ndarray, x_t: np.ndarray, t: np.ndarray, eps_detached: np.ndarray,
              v: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Per-sample variational bound term in bits/dim; gradients reach only ``v``."""
    x0_hat = predict_x0(x_t, t, eps_detached, schedule)
    mean_model = posterior_mean(x0_hat, x_t, t, schedule)
    mean_true = posterior_mean(x0, x_t, t, schedule)
    logvar_true = _bcast(schedule.posterior_log_variance[t], x_t.ndim) + np.zeros_like(x_t)
    logvar_model = model_log_variance(v, t, schedule)
    axes = tuple(range(1, x_t.ndim))
    kl = _gaussian_kl_to_model(mean_true, logvar_true, mean_model, logvar_model).mean(axis=axes)
    nll = _discretized_nll(x0, mean_model, 0.5 * logvar_model).mean(axis=axes)
    first = (t == 0).astype(v.dtype)
    return (nll * first + kl * (1.0 - first)) * (1.0 / math.log(2.0))


def training_loss(model: Callable, x0, schedule: NoiseSchedule, rng: np.random.Generator,
                  c=None, drop=None, lambda_vlb: float = 1e-3) -> LossOutput:
    """Noise-prediction loss on a batch ``x0: [B, H, W, C]``.

    ``t ~ U{0..T-1}``, ``eps ~ N(0, I)``; ``loss_simple`` is the mean squared
    error of the predicted noise. With a variance head the loss adds
    ``lambda_vlb * loss_vlb`` where ``loss_vlb = T * mean_b L_t`` estimates the
    full bound and uses the detached noise prediction for the mean.
    ``drop`` marks samples whose class is replaced by the null class.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    t = rng.integers(0, schedule.num_steps, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)
    dt = T.default_dtype()
    kwargs = {} if drop is None else {"cfg_dropout": drop}
    eps_pred, v = model(x_t.astype(dt), schedule.timestep_map[t], c, **kwargs)
    diff = eps_pred - T.tensor(eps.astype(eps_pred.dtype))
    simple = (diff * diff).mean()
    if v is None:
        return LossOutput(simple, simple.item(), 0.0, t)
    terms = vlb_terms(x0, x_t, t, eps_pred.data.astype(np.float64), v, schedule)
    vlb = terms.mean() * float(schedule.num_steps)
    loss = simple + vlb * lambda_vlb
    return LossOutput(loss, simple.item(), vlb.item(), t)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 250
    guidance_scale: float = 1.0
    seed: int = 0
    clip_range: float | None = 1.0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if self.guidance_scale < 1.0:
            raise ValueError("guidance scale must be >= 1")


def guided_prediction(model: Callable, x_t: np.ndarray, t_model, c, scale: float,
                      num_classes: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Network prediction at one step, with classifier-free guidance when ``scale > 1``.

    Guidance combines noise predictions ``eps_u + s * (eps_c - eps_u)``; the
    variance output comes from the conditional pass.
    """
    dt = T.default_dtype()
    xin = x_t.astype(dt)
    with T.no_grad():
        eps_c, v = model(xin, t_model, c)
        eps_c = eps_c.data.astype(np.float64)
        v = v.data.astype(np.float64) if v is not None else None
        if scale == 1.0 or num_classes == 0 or c is None:
            return eps_c, v
        eps_u, _ = model(xin, t_model, c, cfg_dropout=True)
        eps_u = eps_u.data.astype(np.float64)
    return eps_u + scale * (eps_c - eps_u), v


def p_sample_step(model: Callable, x_t: np.ndarray, i: int, schedule: NoiseSchedule,
                  noise: np.ndarray, c=None, guidance_scale: float = 1.0,
                  num_classes: int = 0, clip_range: float | None = 1.0) -> np.ndarray:
    """One ancestral step ``x_i -> x_{i-1}`` on a (possibly respaced) schedule.

    ``noise`` is the standard normal draw for this step; it is ignored at ``i == 0``.
    """
    b = x_t.shape[0]
    t_idx = np.full(b, i, dtype=np.int64)
    t_model = schedule.timestep_map[t_idx]
    eps, v = guided_prediction(model, x_t, t_model, c, guidance_scale, num_classes)
    if not np.all(np.isfinite(eps)) or (v is not None and not np.all(np.isfinite(v))):
        raise T.NumericDomainError(f"non-finite model output at sampling step {i}")
    x0 = predict_x0(x_t, t_idx, eps, schedule)
    if clip_range is not None:
        x0 = np.clip(x0, -clip_range, clip_range)
    mean = posterior_mean(x0, x_t, t_idx, schedule)
    if i == 0:
        return mean
    if v is None:
        logvar = _bcast(schedule.posterior_log_variance[t_idx], x_t.ndim)
    else:
        logvar = model_log_variance(np.clip(v, -1.0, 1.0), t_idx, schedule)
    return mean + np.exp(0.5 * logvar) * noise


def ddpm_sample(model: Callable, n: int, shape: tuple[int, int, int], sampler: SamplerConfig,
                schedule: NoiseSchedule, c=None, num_classes: int = 0) -> np.ndarray:
    """Draw ``n`` samples ``[n, H, W, C]`` by ancestral sampling over a respaced schedule.

    Sample ``k`` owns the random stream seeded by ``(sampler.seed, k)``, so a
    sample does not depend on how many others are drawn alongside it.
    """
    sched = schedule.respace(sampler.num_steps)
    streams = [np.random.default_rng([sampler.seed, k]) for k in range(n)]
    x = np.stack([r.standard_normal(shape) for r in streams])
    if c is not None:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    for i in range(sched.num_steps - 1, -1, -1):
        noise = np.stack([r.standard_normal(shape) for r in streams]) if i > 0 else None
        x = p_sample_step(model, x, i, sched, noise, c, sampler.guidance_scale,
                          num_classes, sampler.clip_range)
    return x
