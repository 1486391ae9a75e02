"""Continuous-time score-based diffusion over action chunks.

Noise levels are parameterised directly by sigma (sigma_t = t). Sampling uses
the first-order exponential integrator in log-sigma time (DDIM / DPM-Solver-1);
a plain Euler integrator of the probability-flow ODE is kept as a reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ContractError(ValueError):
    """Precondition violated by the caller."""


@dataclass(frozen=True)
class NoiseDist:
    """Log-logistic noise law truncated to [sigma_min, sigma_max].

    ``F(s) = 1 / (1 + (s / scale) ** -shape)``; ``scale`` is the median.
    """

    scale: float = 0.5
    shape: float = 1.5
    sigma_min: float = 0.001
    sigma_max: float = 80.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ContractError("need 0 < sigma_min < sigma_max")
        if self.scale <= 0 or self.shape <= 0:
            raise ContractError("log-logistic scale and shape must be positive")

    def cdf(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        return 1.0 / (1.0 + (sigma / self.scale) ** (-self.shape))

    def truncated_cdf(self, sigma):
        lo, hi = self.cdf(self.sigma_min), self.cdf(self.sigma_max)
        c = (self.cdf(np.clip(sigma, self.sigma_min, self.sigma_max)) - lo) / (hi - lo)
        return np.where(np.asarray(sigma) < self.sigma_min, 0.0, c)

    def inverse(self, u01):
        """Map uniforms on [0, 1] to sigmas; 0 and 1 land exactly on the truncation bounds."""
        u01 = np.asarray(u01, dtype=np.float64)
        lo, hi = self.cdf(self.sigma_min), self.cdf(self.sigma_max)
        u = lo + u01 * (hi - lo)
        with np.errstate(divide="ignore"):
            log_sigma = math.log(self.scale) + (np.log(u) - np.log1p(-u)) / self.shape
        sigma = np.clip(np.exp(log_sigma), self.sigma_min, self.sigma_max)
        sigma = np.where(u01 <= 0.0, self.sigma_min, sigma)
        return np.where(u01 >= 1.0, self.sigma_max, sigma)


def sample_sigma(rng: np.random.Generator, dist: NoiseDist, size=None):
    """Draw sigma by CDF-rescaled inverse transform (exact truncation, no rejection)."""
    out = dist.inverse(rng.random(size))
    return float(out) if size is None else out


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = 0.5

    def c_skip(self, sigma):
        sd2 = self.sigma_data**2
        return sd2 / (sd2 + np.square(sigma))

    def c_out(self, sigma):
        sd = self.sigma_data
        return np.asarray(sigma) * sd / np.sqrt(sd * sd + np.square(sigma))

    def c_in(self, sigma):
        return 1.0 / np.sqrt(self.sigma_data**2 + np.square(sigma))

    def c_noise(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ContractError("c_noise is defined for sigma > 0 only")
        return 0.25 * np.log(sigma)

    def loss_weight(self, sigma):
        sd2 = self.sigma_data**2
        return (np.square(sigma) + sd2) / np.square(np.asarray(sigma) * self.sigma_data)


def _per_sample(coef: np.ndarray, ndim: int, dtype) -> np.ndarray:
    coef = np.asarray(coef, dtype=dtype)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def precondition_apply(net: Callable, a_noisy, cond, sigma, pc: Preconditioner):
    """``c_skip * a + c_out * net(c_in * a, cond, c_noise)``.

    ``sigma`` is a scalar or one value per leading batch entry. Where sigma is 0 the
    output is the input; if every sigma is 0 the network is not called.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ContractError("sigma must be non-negative")
    is_tensor = isinstance(a_noisy, Tensor)
    data = a_noisy.data if is_tensor else np.asarray(a_noisy)
    if np.all(sigma == 0):
        return a_noisy
    if sigma.ndim == 0:
        sigma_b = np.full(data.shape[:1], float(sigma)) if data.ndim > 1 else sigma
    else:
        sigma_b = sigma
    safe = np.where(sigma_b > 0, sigma_b, 1.0)
    c_skip = _per_sample(pc.c_skip(sigma_b), data.ndim, data.dtype)
    c_out = _per_sample(pc.c_out(sigma_b), data.ndim, data.dtype)
    c_in = _per_sample(pc.c_in(sigma_b), data.ndim, data.dtype)
    c_noise = pc.c_noise(safe).astype(data.dtype)
    if is_tensor:
        f = net(a_noisy * c_in, cond, c_noise)
        return a_noisy * c_skip + f * c_out
    f = net(data * c_in, cond, c_noise)
    f = f.data if isinstance(f, Tensor) else f
    return c_skip * data + c_out * f


def score_matching_loss(denoiser: Callable, actions, cond, rng: np.random.Generator,
                        dist: NoiseDist, pc: Preconditioner):
    """Weighted denoising loss ``mean_b lambda(sigma_b) * ||D(a_b + eps_b, cond_b, sigma_b) - a_b||^2``.

    ``denoiser(a_noisy, cond, sigma)`` returns a Tensor or array shaped like ``actions``.
    """
    a = actions.data if isinstance(actions, Tensor) else np.asarray(actions)
    if a.shape[0] == 0:
        raise ContractError("empty batch")
    b = a.shape[0]
    sigma = sample_sigma(rng, dist, size=b)
    eps = rng.standard_normal(a.shape).astype(a.dtype) * _per_sample(sigma, a.ndim, a.dtype)
    noisy = Tensor(a + eps, dtype=a.dtype)
    denoised = denoiser(noisy, cond, sigma)
    weight = _per_sample(pc.loss_weight(sigma), a.ndim, a.dtype)
    if not isinstance(denoised, Tensor):
        err = (np.asarray(denoised) - a) ** 2 * weight
        return float(err.reshape(b, -1).sum(axis=1).mean())
    diff = denoised - Tensor(a, dtype=a.dtype)
    per = (diff * diff * weight).reshape(b, -1).sum(axis=1)
    return per.mean()


def exponential_sigmas(n: int, sigma_min: float = 0.001, sigma_max: float = 80.0) -> np.ndarray:
    """Log-linear schedule from sigma_max down to sigma_min, with a terminal 0 appended."""
    if n < 2:
        raise ContractError("an exponential schedule needs at least 2 levels")
    if not 0 < sigma_min < sigma_max:
        raise ContractError("need 0 < sigma_min < sigma_max")
    frac = np.arange(n) / (n - 1)
    sig = np.exp(math.log(sigma_max) + frac * (math.log(sigma_min) - math.log(sigma_max)))
    sig[0], sig[-1] = sigma_max, sigma_min
    return np.append(sig, 0.0)


def t_fn(sigma):
    return -np.log(sigma)


def sigma_fn(t):
    return np.exp(-t)


def ddim_step(a, denoised, sigma, sigma_next):
    """One DPM-Solver-1 step in t = -log(sigma)."""
    if not sigma > sigma_next >= 0:
        raise ContractError(f"need sigma > sigma_next >= 0, got {sigma}, {sigma_next}")
    if sigma_next == 0:
        return denoised
    h = t_fn(sigma_next) - t_fn(sigma)
    return (sigma_fn(t_fn(sigma_next)) / sigma_fn(t_fn(sigma))) * a - np.expm1(-h) * denoised


def euler_ode_step(a, denoised, sigma, sigma_next):
    """Euler step of da/dsigma = (a - D(a, sigma)) / sigma."""
    if sigma <= 0:
        raise ContractError("Euler step needs sigma > 0")
    if not sigma > sigma_next >= 0:
        raise ContractError(f"need sigma > sigma_next >= 0, got {sigma}, {sigma_next}")
    return a + (sigma_next - sigma) * (a - denoised) / sigma


def sample_action_chunk(denoiser: Callable, shape, schedule, rng: np.random.Generator | None = None,
                        a0=None, step: Callable = ddim_step):
    """Integrate from a0 ~ N(0, sigma_0^2 I) along ``schedule``.

    ``denoiser(a, sigma)`` returns the denoised estimate as an array. Either ``rng``
    or an explicit initial sample ``a0`` must be given.
    """
    schedule = np.asarray(schedule, dtype=np.float64)
    if schedule.ndim != 1 or schedule.size < 2 or np.any(np.diff(schedule) >= 0):
        raise ContractError("schedule must be strictly decreasing")
    if a0 is None:
        a = rng.standard_normal(shape) * schedule[0]
    else:
        a = np.array(a0, dtype=np.float64)
    for s, s_next in zip(schedule[:-1], schedule[1:]):
        denoised = denoiser(a, float(s))
        a = step(a, denoised, float(s), float(s_next))
    return a


def gaussian_denoiser(std: float, mean: float = 0.0) -> Callable:
    """Exact posterior-mean denoiser for data ~ N(mean, std^2 I)."""

    def denoise(a, sigma):
        w = std * std / (std * std + sigma * sigma)
        return mean + (np.asarray(a) - mean) * w

    return denoise


def run_sampler_oracle(n_samples: int = 10_000, std: float = 0.5, steps: int = 10,
                       euler_steps: int = 200, sigma_min: float = 0.001, sigma_max: float = 80.0,
                       seed: int = 0) -> dict:
    """Sample the analytic Gaussian denoiser with DDIM and with fine Euler from shared noise."""
    rng = np.random.default_rng(seed)
    den = gaussian_denoiser(std)
    ddim_sched = exponential_sigmas(steps, sigma_min, sigma_max)
    euler_sched = exponential_sigmas(euler_steps, sigma_min, sigma_max)
    a0 = rng.standard_normal(n_samples) * sigma_max
    ddim = sample_action_chunk(den, a0.shape, ddim_sched, a0=a0)
    euler = sample_action_chunk(den, a0.shape, euler_sched, a0=a0, step=euler_ode_step)
    target_var = std * std
    return {
        "mean": float(ddim.mean()),
        "var": float(ddim.var()),
        "var_rel_err": float(abs(ddim.var() - target_var) / target_var),
        "euler_var": float(euler.var()),
        "max_traj_diff": float(np.max(np.abs(ddim - euler))),
    }
