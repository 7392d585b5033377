"""Flow-matching path, loss, timestep sampling and samplers.

Convention: ``x_t = t * x1 + (1 - t) * x0`` with ``x0`` Gaussian noise at
``t = 0`` and data ``x1`` at ``t = 1``. Student schedules are written as
noise levels ``sigma = 1 - t`` (``[1.0, 0.5]`` starts from pure noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from chunkcast.errors import ConfigError, DimensionError, NumericError
from chunkcast.numerics import Tensor, functional as F, no_grad


def _check_same_shape(a, b, op: str) -> None:
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{op}: shapes {np.shape(a)} and {np.shape(b)} differ")


def _expand_t(t, ndim: int):
    """Per-sample t of shape [B] -> [B, 1, ..., 1]; scalars pass through."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return float(t)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(x0, x1, t):
    """Point on the straight noise-to-data path at time ``t``."""
    _check_same_shape(x0, x1, "interpolate")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError("t must lie in [0, 1]")
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        tt = _expand_t(t, np.ndim(x0.data if isinstance(x0, Tensor) else x0))
        return F.add(F.mul(x1, tt), F.mul(x0, 1.0 - np.asarray(tt)))
    tt = _expand_t(t, np.ndim(x0))
    return tt * np.asarray(x1) + (1.0 - tt) * np.asarray(x0)


def velocity_target(x0, x1):
    """Ground-truth velocity ``x1 - x0`` along the path."""
    _check_same_shape(x0, x1, "velocity_target")
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        return F.sub(x1, x0)
    return np.asarray(x1) - np.asarray(x0)


def fm_loss(predicted_v, x0, x1) -> Tensor:
    """Mean squared error between predicted velocity and ``x1 - x0``."""
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    x1d = x1.data if isinstance(x1, Tensor) else np.asarray(x1)
    _check_same_shape(predicted_v.data if isinstance(predicted_v, Tensor) else predicted_v, x0d, "fm_loss")
    if not (np.isfinite(x0d).all() and np.isfinite(x1d).all()):
        raise NumericError("fm_loss received non-finite latents")
    return F.mse(predicted_v, x1d - x0d)


@dataclass
class LogitNormalSampler:
    """t = sigmoid(z), z ~ Normal(mu, sigma^2)."""

    mu: float = 0.0
    sigma: float = 1.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        self.rng = np.random.default_rng(self.seed)

    def sample(self, n: int | None = None):
        z = self.rng.normal(self.mu, self.sigma, size=n)
        t = expit(z)
        # keep strictly inside (0, 1) even for extreme z
        tiny = np.finfo(float).eps
        return np.clip(t, tiny, 1.0 - tiny)

    def cdf(self, t):
        return norm.cdf((logit(np.asarray(t)) - self.mu) / self.sigma)


def fm_training_loss(model, x1, cond, t, x0, self_mask=None, layout=None) -> Tensor:
    """FM loss of ``model`` on clean ``x1`` with noise ``x0`` at per-sample ``t``.

    Frames pinned to the clean reference carry no prediction and are skipped.
    """
    x1 = np.asarray(x1, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    _check_same_shape(x0, x1, "fm_training_loss")
    xt = interpolate(x0, x1, t)
    u = model.velocity(xt, t, cond, self_mask, layout)
    R = 0 if cond is None else cond.ref_len
    if R:
        return fm_loss(u[:, R:], x0[:, R:], x1[:, R:])
    return fm_loss(u, x0, x1)


def sample_timestep(sampler: LogitNormalSampler) -> float:
    return float(sampler.sample())


@dataclass(frozen=True)
class StudentSchedule:
    """Noise levels visited by the few-step generator; its length is the NFE."""

    sigmas: tuple[float, ...] = (1.0, 0.5)

    def __post_init__(self):
        s = tuple(float(x) for x in self.sigmas)
        object.__setattr__(self, "sigmas", s)
        if not s:
            raise ConfigError("empty student schedule")
        if s[0] != 1.0:
            raise ConfigError("student schedule must start at noise level 1.0")
        if any(x <= 0 or x > 1 for x in s):
            raise ConfigError("noise levels must lie in (0, 1]")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ConfigError("noise levels must be strictly decreasing")

    @property
    def nfe(self) -> int:
        return len(self.sigmas)

    @classmethod
    def uniform(cls, steps: int) -> "StudentSchedule":
        return cls(tuple(1.0 - k / steps for k in range(steps)))


def ode_sample(model, cond, steps: int, self_mask=None, seed: int = 0, shape=None, layout=None,
               noise: np.ndarray | None = None) -> np.ndarray:
    """Euler-integrate the learned velocity from noise (t=0) to data (t=1)."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = np.random.default_rng(seed).standard_normal(shape) if noise is None else np.array(noise, dtype=float)
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            t = np.full(x.shape[0], k * dt)
            u = model.velocity(x, t, cond, self_mask, layout).data
            x = x + dt * u
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite state after Euler step {k}")
    return model.pin(x, cond)


def few_step_generate(student, cond, schedule: StudentSchedule, noise: np.ndarray, self_mask=None, *,
                      rng: np.random.Generator | None = None, renoise: list[np.ndarray] | None = None,
                      layout=None, grad_last: bool = False) -> Tensor:
    """Few-step generator: predict x1 at each noise level, re-noise to the next.

    ``renoise[i-1]`` supplies the fresh noise for step ``i``; otherwise it is
    drawn from ``rng``. Only the final evaluation records a tape when
    ``grad_last`` is set. Exactly ``schedule.nfe`` model evaluations.
    """
    sigmas = schedule.sigmas
    if not sigmas:
        raise ConfigError("empty schedule")
    x = np.asarray(noise, dtype=float)
    B = x.shape[0]
    x1_hat = None
    for i, sigma in enumerate(sigmas):
        t = 1.0 - sigma
        if i > 0:
            eps = renoise[i - 1] if renoise is not None else rng.standard_normal(x.shape)
            x = t * x1_hat + sigma * eps
        last = i == len(sigmas) - 1
        if last and grad_last:
            u = student.velocity(x, np.full(B, t), cond, self_mask, layout)
            return student.pin(F.add(F.mul(u, sigma), x), cond)
        with no_grad():
            u = student.velocity(x, np.full(B, t), cond, self_mask, layout)
        x1_hat = x + sigma * u.data
    return Tensor(student.pin(x1_hat, cond))
