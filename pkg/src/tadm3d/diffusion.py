"""DDPM forward corruption, reverse steps and ancestral sampling.

Steps are 1-based: ``t`` runs over ``1..T`` and array slot ``t - 1`` holds the
coefficients of step ``t``. ``alpha_bar_prev`` of step 1 is defined as 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DomainError
from .tensor_core import Tensor, no_grad, ops

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ConfigurationError("a schedule needs at least two steps")
        if not np.all((b > 0) & (b < 1)):
            raise ConfigurationError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        abar = np.cumprod(alphas)
        abar_prev = np.concatenate([[1.0], abar[:-1]])
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", abar)
        object.__setattr__(self, "alpha_bars_prev", abar_prev)
        object.__setattr__(self, "posterior_variance", b * (1.0 - abar_prev) / (1.0 - abar))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise DomainError(f"diffusion step {t.tolist()} outside [1, {self.T}]")
        return t.astype(np.int64)


def make_schedule(kind: str = "linear", T: int = 1000) -> NoiseSchedule:
    if T < 2:
        raise ConfigurationError(f"T must be >= 2, got {T}")
    if kind != "linear":
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(np.linspace(BETA_START, BETA_END, T))


def _per_sample(coef, ndim):
    """Broadcast per-sample coefficients over the trailing axes."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps (``t`` scalar or one per sample)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t = sched.check_step(t)
    ab = _per_sample(sched.alpha_bars[t - 1], x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def q_step(x_prev, t, noise, sched: NoiseSchedule):
    """One forward transition q(x_t | x_{t-1})."""
    t = sched.check_step(t)
    b = _per_sample(sched.betas[t - 1], np.ndim(x_prev))
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def p_sample_step(eps_hat, x_t, t, sched: NoiseSchedule, noise):
    """One reverse step with posterior variance; the noise term is dropped at t = 1."""
    eps_hat = np.asarray(eps_hat)
    x_t = np.asarray(x_t)
    if eps_hat.shape != x_t.shape:
        raise ContractError(f"predicted-noise shape {eps_hat.shape} != sample shape {x_t.shape}")
    t = sched.check_step(t)
    nd = x_t.ndim
    a = _per_sample(sched.alphas[t - 1], nd)
    b = _per_sample(sched.betas[t - 1], nd)
    ab = _per_sample(sched.alpha_bars[t - 1], nd)
    sigma = np.sqrt(_per_sample(sched.posterior_variance[t - 1], nd))
    sigma = np.where(_per_sample(t, nd) > 1, sigma, 0.0)
    mean = (x_t - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    return (mean + sigma * np.asarray(noise)).astype(x_t.dtype)


def predict_x0(x_t, eps_hat, t, sched: NoiseSchedule):
    """x0 estimate (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).

    Differentiable in ``eps_hat`` when it is a :class:`Tensor`.
    """
    t = sched.check_step(t)
    nd = np.ndim(x_t.data if isinstance(x_t, Tensor) else x_t)
    ab = _per_sample(sched.alpha_bars[t - 1], nd)
    c_x = 1.0 / np.sqrt(ab)
    c_e = np.sqrt(1.0 - ab) / np.sqrt(ab)
    if isinstance(eps_hat, Tensor) or isinstance(x_t, Tensor):
        xt = ops.as_tensor(x_t)
        eh = ops.as_tensor(eps_hat)
        return ops.sub(ops.mul(xt, c_x.astype(np.float32)), ops.mul(eh, c_e.astype(np.float32)))
    x_t = np.asarray(x_t)
    return (c_x * x_t - c_e * np.asarray(eps_hat)).astype(x_t.dtype)


def sample(model, cond, sched: NoiseSchedule, seed, clamp=1.0):
    """Ancestral sampling of scaled residuals from X_T ~ N(0, I).

    ``seed`` may be a single integer (one generator for the whole batch) or a
    sequence with one seed per batch element, in which case every element's
    trajectory is identical to sampling it alone. Returns an ``(N, 1, D, H, W)``
    float32 array clamped to ``[-clamp, clamp]``.
    """
    cond.validate()
    n = cond.batch_size
    e = model.extent
    shape = (1, e, e, e)
    seeds = np.atleast_1d(np.asarray(seed, dtype=np.int64))
    if seeds.size == 1 and n > 1:
        rngs = [np.random.default_rng(int(seeds[0]))]
        draw = lambda: rngs[0].standard_normal((n,) + shape)  # noqa: E731
    else:
        if seeds.size != n:
            raise ContractError(f"{seeds.size} seeds for a batch of {n}")
        rngs = [np.random.default_rng(int(s)) for s in seeds]
        draw = lambda: np.stack([r.standard_normal(shape) for r in rngs])  # noqa: E731
    x = draw().astype(np.float32)
    with no_grad():
        feats = cond.features if cond.features is not None else model.encode(cond.baseline)
        for t in range(sched.T, 0, -1):
            ts = np.full(n, t, dtype=np.int64)
            eps_hat = model.denoise(Tensor(x), ts, cond.with_features(feats)).data
            noise = draw().astype(np.float32) if t > 1 else np.zeros_like(x)
            x = p_sample_step(eps_hat, x, ts, sched, noise)
    return np.clip(x, -clamp, clamp).astype(np.float32)
