"""Asymmetric distribution-matching distillation.

A bidirectional teacher (frozen) supplies the data score, a bidirectional
fake-score model tracks the student's output distribution, and the sparse
causal few-step student is pushed along ``s_gen - s_data``. A regression
loss on real samples anchors the student.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from chunkcast.chunking import ChunkLayout, build_sparse_mask, seeded_noise, stream_generate
from chunkcast.errors import ConfigError, ContractError, NumericError
from chunkcast.model import Conditioning
from chunkcast.numerics import Adam, Tensor, backward, functional as F, no_grad
from chunkcast.schedule import LogitNormalSampler, StudentSchedule, few_step_generate, fm_training_loss

NORM_FLOOR = 1e-8
T_EDGE = 1e-3

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _bcast_t(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full((x.shape[0],) + (1,) * (x.ndim - 1), float(t))
    return t.reshape((-1,) + (1,) * (x.ndim - 1))


def _check_interior(t) -> None:
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ContractError("score is undefined at t = 0 or t = 1")


def velocity_to_score(u, x_t, t):
    """Marginal score implied by a velocity prediction on the straight path.

    With ``x_t = t*x1 + (1-t)*x0`` the denoised estimate is
    ``x1_hat = x_t + (1-t)*u`` and Tweedie gives
    ``score = (t*x1_hat - x_t)/(1-t)^2 = (t*u - x_t)/(1-t)``.
    """
    _check_interior(t)
    x_t = np.asarray(x_t, dtype=float)
    tt = _bcast_t(t, x_t)
    return (tt * np.asarray(u) - x_t) / (1.0 - tt)


def score_to_x1(score, x_t, t):
    """Invert Tweedie: ``x1_hat = (x_t + (1-t)^2 * score) / t``."""
    _check_interior(t)
    x_t = np.asarray(x_t, dtype=float)
    tt = _bcast_t(t, x_t)
    return (x_t + (1.0 - tt) ** 2 * np.asarray(score)) / tt


def model_score_fn(model, cond=None) -> ScoreFn:
    """Score function of a velocity model under full bidirectional attention."""

    def fn(x_t, t):
        with no_grad():
            u = model.velocity(x_t, np.asarray(t, dtype=float).reshape(-1), cond, None, None).data
        s = velocity_to_score(u, x_t, t)
        if not np.isfinite(s).all():
            raise NumericError("non-finite score")
        return s

    return fn


def kl_gradient_estimate(x_gen, t, score_data: ScoreFn, score_gen: ScoreFn, noise) -> np.ndarray:
    """Single-noise estimate of d KL(gen_t || data_t) / d x_gen, i.e. ``t*(s_gen - s_data)``."""
    _check_interior(t)
    x_gen = np.asarray(x_gen, dtype=float)
    tt = _bcast_t(t, x_gen)
    x_t = tt * x_gen + (1.0 - tt) * np.asarray(noise)
    return tt * (score_gen(x_t, t) - score_data(x_t, t))


def dmd_direction(x_gen, t, score_data: ScoreFn, score_gen: ScoreFn, noise, frozen_frames: int = 0):
    """Normalized update direction ``w_t * (s_gen - s_data) / norm`` per sample.

    ``w_t = (1-t)^2 / t`` turns the score difference into a difference of
    denoised estimates; ``norm`` is the mean absolute teacher residual
    ``|x1_hat_data - x_gen|`` of each sample, clamped at ``1e-8``.
    Returns ``(direction, norm)``. Frames pinned to the reference get zero.
    """
    _check_interior(t)
    x_gen = np.asarray(x_gen, dtype=float)
    tt = _bcast_t(t, x_gen)
    x_t = tt * x_gen + (1.0 - tt) * np.asarray(noise)
    s_data = score_data(x_t, t)
    s_gen = score_gen(x_t, t)
    diff = s_gen - s_data
    if not np.isfinite(diff).all():
        raise NumericError("non-finite score difference")
    x1_data = score_to_x1(s_data, x_t, t)
    resid = np.abs(x1_data - x_gen)[:, frozen_frames:]
    norm = np.maximum(resid.reshape(resid.shape[0], -1).mean(axis=1), NORM_FLOOR)
    direction = (1.0 - tt) ** 2 / tt * diff / norm.reshape(tt.shape)
    if frozen_frames:
        direction[:, :frozen_frames] = 0.0
    return direction, norm


def dmd_gradient_loss(x_gen: Tensor, t, teacher, fake_score, cond=None, noise=None, *,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Surrogate whose gradient w.r.t. ``x_gen`` is the DMD direction (mean-reduced).

    ``0.5 * mean((x_gen - stopgrad(x_gen - d))^2)`` has gradient ``d / x_gen.size``.
    """
    if noise is None:
        noise = (rng or np.random.default_rng()).standard_normal(x_gen.shape)
    frozen = 0 if cond is None else cond.ref_len
    d, _ = dmd_direction(x_gen.data, t, model_score_fn(teacher, cond), model_score_fn(fake_score, cond),
                         noise, frozen)
    target = x_gen.data - d
    return F.mul(F.mse(x_gen, target), 0.5)


def regression_loss(student_prediction, ground_truth_latent, synthetic=False) -> Tensor:
    """MSE anchor between the student's final prediction and real latents."""
    if ground_truth_latent is None or np.any(synthetic):
        raise ContractError("regression loss needs a real sample with ground truth")
    return F.mse(student_prediction, np.asarray(ground_truth_latent, dtype=float))


def fake_score_step(fake_score, student_samples, t_sampler: LogitNormalSampler, optimizer: Adam, cond=None,
                    rng: np.random.Generator | None = None) -> float:
    """One FM optimizer step fitting ``fake_score`` to detached student samples."""
    x1 = student_samples.data if isinstance(student_samples, Tensor) else np.asarray(student_samples)
    if isinstance(student_samples, Tensor) and student_samples.requires_grad:
        raise ContractError("student samples must be detached")
    rng = rng or np.random.default_rng()
    x0 = rng.standard_normal(x1.shape)
    t = t_sampler.sample(x1.shape[0])
    loss = fm_training_loss(fake_score, x1, cond, t, x0)
    grads = backward(loss, fake_score.params)
    optimizer.step(grads)
    return float(loss.data)


def generate_synthetic(student, image, audio_track, seed: int, modes=None, layout: ChunkLayout | None = None,
                       schedule: StudentSchedule | None = None, style=None) -> np.ndarray:
    """Stream a full window from a reference chunk and an audio track (detached).

    ``image``: [fpc, N, L] (or batched [B, fpc, N, L]) clean reference latents.
    Returns latents shaped like a real clip window, chunk 0 being the reference.
    """
    layout = layout or ChunkLayout()
    schedule = schedule or StudentSchedule()
    image = np.asarray(image, dtype=float)
    audio = np.asarray(audio_track, dtype=float)
    single = image.ndim == 3
    if single:
        image, audio = image[None], audio[None]
        modes = None if modes is None else np.asarray(modes)[None]
    B, F_ = audio.shape[0], layout.window_frames
    if modes is None:
        modes = np.ones((B, audio.shape[1]), dtype=np.int8)
    cond = Conditioning(image, audio, np.asarray(modes), style)
    shape = (B, layout.frames_per_chunk) + image.shape[2:]
    noise = seeded_noise(seed, shape)
    parts = [image]
    for _, chunk in stream_generate(student, cond, layout, schedule.sigmas, noise, layout.chunks_per_window - 1):
        parts.append(chunk)
    out = np.concatenate(parts, axis=1)
    assert out.shape[1] == F_
    return out[0] if single else out


@dataclass
class MixSchedule:
    """Real-only warmup, then each sample is synthetic with probability ``synthetic_ratio``."""

    warmup_steps: int
    synthetic_ratio: float = 0.5
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.synthetic_ratio <= 1.0:
            raise ConfigError("synthetic_ratio must lie in [0, 1]")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        self.rng = np.random.default_rng([self.seed, 0x313])

    def draw(self, step: int, batch: int) -> np.ndarray:
        """Boolean synthetic flags for one batch."""
        if step < self.warmup_steps:
            return np.zeros(batch, dtype=bool)
        return self.rng.random(batch) < self.synthetic_ratio


@dataclass
class DistillConfig:
    steps: int = 3000
    batch: int = 4
    lr_student: float = 2e-4
    lr_fake: float = 2e-4
    lambda_reg: float = 0.25
    warmup_fraction: float = 0.4
    synthetic_ratio: float = 0.5
    fake_steps: int = 1  # fake-score updates per student update
    sigmas: tuple = (1.0, 0.5)
    t_mu: float = 0.0
    t_sigma: float = 1.0
    grad_clip: float | None = 1.0
    pool_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        StudentSchedule(self.sigmas)
        if self.batch < 1 or self.steps < 0 or self.fake_steps < 1:
            raise ConfigError("batch and fake_steps must be >= 1, steps >= 0")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")


@dataclass
class Batch:
    """Real latents ``x1`` and their conditioning (``cond`` is None for vector toys)."""

    x1: np.ndarray
    cond: Conditioning | None = None

    @property
    def size(self) -> int:
        return self.x1.shape[0]


class DistillAbort(NumericError):
    """A distillation step produced a non-finite value; ``snapshot`` holds its inputs."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class DistillState:
    """Teacher (frozen), student and fake-score models plus optimizers and counters.

    With a ``layout`` the student runs under the sparse causal mask; teacher
    and fake score always run bidirectionally.
    """

    def __init__(self, teacher, config: DistillConfig, layout: ChunkLayout | None = None, student=None,
                 fake_score=None):
        self.config = config
        self.teacher = teacher
        self.student = student if student is not None else teacher.clone()
        self.fake_score = fake_score if fake_score is not None else teacher.clone()
        self.layout = layout
        self.student_mask = None if layout is None else build_sparse_mask(layout)
        self.schedule = StudentSchedule(config.sigmas)
        self.opt_student = Adam(self.student.params, config.lr_student, grad_clip=config.grad_clip)
        self.opt_fake = Adam(self.fake_score.params, config.lr_fake, grad_clip=config.grad_clip)
        self.mix = MixSchedule(int(round(config.warmup_fraction * config.steps)), config.synthetic_ratio,
                               config.seed)
        self.sampler = LogitNormalSampler(config.t_mu, config.t_sigma, seed=config.seed + 1)
        self.rng = np.random.default_rng([config.seed, 0xD15])
        self.pool: collections.deque = collections.deque(maxlen=config.pool_size)
        self.step = 0

    def synthetic_conditioning(self, cond: Conditioning, flags: np.ndarray) -> Conditioning:
        """Swap the reference of flagged rows for the tail chunk of an earlier student window.

        Audio and modes stay those of the (real) row, so the reference and the
        audio come from different clips.
        """
        if cond is None or not flags.any() or not self.pool:
            return cond
        ref = cond.reference.copy()
        for i in np.flatnonzero(flags):
            ref[i] = self.pool[int(self.rng.integers(len(self.pool)))]
        return Conditioning(ref, cond.audio, cond.modes, cond.style)


def _sample_t(state: DistillState, n: int) -> np.ndarray:
    return np.clip(state.sampler.sample(n), T_EDGE, 1.0 - T_EDGE)


def distill_step(batch: Batch, state: DistillState) -> dict:
    """One student update followed by ``fake_steps`` fake-score updates."""
    cfg = state.config
    B = batch.size
    flags = state.mix.draw(state.step, B)
    if batch.cond is not None and not state.pool:
        flags[:] = False
    cond = state.synthetic_conditioning(batch.cond, flags)
    noise = state.rng.standard_normal(batch.x1.shape)
    renoise = [state.rng.standard_normal(batch.x1.shape) for _ in range(state.schedule.nfe - 1)]
    t = _sample_t(state, B)
    dmd_noise = state.rng.standard_normal(batch.x1.shape)
    # one timestep per sample, shared by all of its chunks
    assert t.shape == (B,)
    snapshot = {"step": state.step, "t": t.copy(), "seed": cfg.seed, "x1": batch.x1, "noise": noise,
                "synthetic": flags.copy()}
    R = 0 if cond is None else cond.ref_len
    try:
        x_gen = few_step_generate(state.student, cond, state.schedule, noise, state.student_mask,
                                  renoise=renoise, layout=state.layout, grad_last=True)
        dmd = dmd_gradient_loss(x_gen, t, state.teacher, state.fake_score, cond, dmd_noise)
        loss = dmd
        reg_value = 0.0
        real = np.flatnonzero(~flags)
        if cfg.lambda_reg > 0 and real.size:
            pred = F.take(x_gen, real, axis=0)
            truth = batch.x1[real]
            if R:
                pred, truth = pred[:, R:], truth[:, R:]
            reg = regression_loss(pred, truth)
            reg_value = float(reg.data)
            loss = F.add(loss, F.mul(reg, cfg.lambda_reg))
        grads = backward(loss, state.student.params)
        gnorm = state.opt_student.step(grads)
        samples = Tensor(x_gen.data)
        fake_losses = [fake_score_step(state.fake_score, samples, state.sampler, state.opt_fake, cond, state.rng)
                       for _ in range(cfg.fake_steps)]
    except NumericError as exc:
        raise DistillAbort(f"distill step {state.step} aborted: {exc}", snapshot) from exc
    if cond is not None:
        fpc = R if R else x_gen.shape[1]
        for i in np.flatnonzero(~flags):
            state.pool.append(x_gen.data[i, -fpc:].copy())
    state.step += 1
    return {
        "step": state.step,
        "dmd_loss": float(dmd.data),
        "reg_loss": reg_value,
        "fake_loss": float(np.mean(fake_losses)),
        "mix_fraction": float(flags.mean()),
        "grad_norm": gnorm,
    }
