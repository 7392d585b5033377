"""Training and evaluation loops shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from chunkcast.chunking import ChunkLayout, build_sparse_mask
from chunkcast.distill import Batch, DistillConfig, DistillState, distill_step
from chunkcast.errors import NumericError
from chunkcast.model import Conditioning, DiT, Mode, ModelConfig, is_audio_param
from chunkcast.numerics import Adam, backward
from chunkcast.pipeline import ModeController, StreamSession, switch_mode
from chunkcast.schedule import LogitNormalSampler, StudentSchedule, few_step_generate, fm_training_loss, ode_sample
from chunkcast.synthdata import Clip, PseudoVAE, PuppetSpec, check_face_tokens, generate_clip, sync_score


@dataclass
class LatentData:
    """Encoded clips as dense arrays."""

    latents: np.ndarray  # [n, F, N, L]
    audio: np.ndarray  # [n, F, A, Da]
    modes: np.ndarray  # [n, F]
    amplitude: np.ndarray  # [n, F]

    @classmethod
    def from_clips(cls, clips: list[Clip], vae: PseudoVAE) -> "LatentData":
        return cls(
            np.stack([vae.encode(c.frames) for c in clips]),
            np.stack([c.audio for c in clips]),
            np.stack([c.modes for c in clips]).astype(np.int8),
            np.stack([c.amplitude for c in clips]),
        )

    def __len__(self) -> int:
        return self.latents.shape[0]

    def batch(self, idx, ref_len: int) -> Batch:
        x1 = self.latents[idx]
        return Batch(x1, Conditioning(x1[:, :ref_len].copy(), self.audio[idx], self.modes[idx]))

    def sample(self, rng: np.random.Generator, size: int, ref_len: int) -> Batch:
        return self.batch(rng.integers(0, len(self), size), ref_len)


def puppet_model_config(spec: PuppetSpec, **overrides) -> ModelConfig:
    cfg = ModelConfig(**{
        "frame_tokens": spec.frame_tokens,
        "latent_dim": spec.latent_dim,
        "audio_dim": spec.audio_dim,
        "audio_tokens_per_frame": spec.audio_rate,
        **overrides,
    })
    check_face_tokens(spec, cfg.face_token_ids)
    return cfg


class JsonlLogger:
    def __init__(self, path=None, every: int = 1):
        self.fh = open(path, "a") if path else None
        self.every = max(1, every)

    def __call__(self, step: int, record: dict) -> None:
        if self.fh is not None and (step % self.every == 0 or step == 1):
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def train_teacher(model: DiT, data: LatentData, steps: int, batch: int = 4, lr: float = 1e-3, seed: int = 0,
                  ref_choices=(3, 7), ref_weights=(0.75, 0.25), freeze_non_audio: bool = False,
                  grad_clip: float | None = 1.0, t_mu: float = 0.0, t_sigma: float = 1.0,
                  log: Callable[[int, dict], None] | None = None) -> list[float]:
    """Flow-matching pretraining with full bidirectional attention.

    The reference length is drawn per batch so the teacher serves students
    of several chunk sizes. With ``freeze_non_audio`` only audio-path
    parameters move.
    """
    rng = np.random.default_rng([seed, 0x7EA])
    sampler = LogitNormalSampler(t_mu, t_sigma, seed=seed)
    opt = Adam(model.params, lr, grad_clip=grad_clip)
    trainable = is_audio_param if freeze_non_audio else None
    losses = []
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        R = int(rng.choice(ref_choices, p=ref_weights))
        b = data.sample(rng, batch, R)
        t = sampler.sample(batch)
        x0 = rng.standard_normal(b.x1.shape)
        loss = fm_training_loss(model, b.x1, b.cond, t, x0)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite teacher loss at step {step} (seed {seed}, t={t.tolist()})")
        grads = backward(loss, model.params)
        opt.step(grads, trainable)
        losses.append(float(loss.data))
        if log is not None:
            log(step, {"step": step, "fm_loss": losses[-1], "wall_ms": 1000 * (time.perf_counter() - t0)})
    return losses


def run_distill(teacher: DiT, data: LatentData, config: DistillConfig, layout: ChunkLayout,
                log: Callable[[int, dict], None] | None = None) -> DistillState:
    state = DistillState(teacher, config, layout)
    rng = np.random.default_rng([config.seed, 0xB47])
    ref = layout.frames_per_chunk
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        metrics = distill_step(data.sample(rng, config.batch, ref), state)
        metrics["wall_ms"] = 1000 * (time.perf_counter() - t0)
        if log is not None:
            log(step, metrics)
    return state


def teacher_samples(teacher: DiT, data: LatentData, idx, ref_len: int = 3, steps: int = 12, seed: int = 0):
    b = data.batch(idx, ref_len)
    return ode_sample(teacher, b.cond, steps, seed=seed, shape=b.x1.shape)


def stream_track(spec: PuppetSpec, n_chunks: int, fpc: int, seed: int, switch_chunk: int | None):
    """A long puppet clip covering the reference chunk plus ``n_chunks`` chunks."""
    total = fpc * (n_chunks + 1)
    long_spec = PuppetSpec(**{**spec.to_dict(), "frames": total})
    modes = np.full(total, Mode.SPEAKING, dtype=np.int8)
    if switch_chunk is not None:
        modes[switch_chunk * fpc :] = Mode.SILENCE
    return generate_clip(long_spec, seed, modes)


def evaluate_streams(student: DiT, spec: PuppetSpec, vae: PseudoVAE, layout: ChunkLayout, sigmas=(1.0, 0.5),
                     n_streams: int = 4, n_chunks: int = 40, seed: int = 0) -> dict:
    """Stream Speaking for the first half and Silence for the second; pooled sync scores.

    The switch is issued through the mode controller; ground-truth modes come
    from the controller's effective chunk, and the reference chunk is excluded.
    """
    fpc = layout.frames_per_chunk
    half = n_chunks // 2 + 1
    frames, amps, modes = [], [], []
    for s in range(n_streams):
        clip = stream_track(spec, n_chunks, fpc, seed * 1000 + s, None)
        controller = ModeController(Mode.SPEAKING)
        session = StreamSession(student, vae.encode(clip.frames[:fpc]), clip.audio, layout, sigmas, vae,
                                seed=seed * 1000 + s, controller=controller)
        effective = switch_mode(session, half, Mode.SILENCE)
        truth = np.where(np.arange(clip.n_frames) // fpc >= effective, Mode.SILENCE, Mode.SPEAKING)
        for c, latents in session.generate(n_chunks):
            frames.append(vae.decode(latents))
            sl = slice(c * fpc, (c + 1) * fpc)
            amps.append(clip.amplitude[sl])
            modes.append(truth[sl])
    frames, amps, modes = np.concatenate(frames), np.concatenate(amps), np.concatenate(modes)
    return {
        "sync_speaking": sync_score(frames, amps, modes, spec, Mode.SPEAKING),
        "sync_silence": sync_score(frames, amps, modes, spec, Mode.SILENCE),
        "frames": int(frames.shape[0]),
    }


def window_sync(windows: np.ndarray, data: LatentData, idx, vae: PseudoVAE, spec: PuppetSpec, start: int) -> float:
    """Pooled Speaking sync of generated windows (frames from ``start`` on)."""
    frames = vae.decode(windows[:, start:]).reshape((-1,) + spec.grid)
    return sync_score(frames, data.amplitude[idx, start:].reshape(-1), data.modes[idx, start:].reshape(-1), spec)


def student_windows(student: DiT, data: LatentData, idx, layout: ChunkLayout, sigmas, seed: int = 0) -> np.ndarray:
    """Full-window sparse-causal few-step generation (equivalent to streaming)."""
    b = data.batch(idx, layout.frames_per_chunk)
    rng = np.random.default_rng([seed, 0xE7A])
    noise = rng.standard_normal(b.x1.shape)
    renoise = [rng.standard_normal(b.x1.shape) for _ in range(len(sigmas) - 1)]
    return few_step_generate(student, b.cond, StudentSchedule(tuple(sigmas)), noise, build_sparse_mask(layout),
                             renoise=renoise, layout=layout).data


def latent_mse_proxy(student: DiT, data: LatentData, idx, layout: ChunkLayout, sigmas, frames=(7, 21),
                     seed: int = 0) -> float:
    """Mean squared latent error against ground truth over a frame range every cell generates."""
    out = student_windows(student, data, idx, layout, sigmas, seed)
    lo, hi = frames
    return float(np.mean((out[:, lo:hi] - data.latents[idx, lo:hi]) ** 2))


ABLATION_GRID = ((3, 2), (3, 4), (7, 2), (7, 4))


def ablation_cell_layout(chunk: int, window_frames: int = 21) -> ChunkLayout:
    return ChunkLayout(chunk, window_frames // chunk)


def run_ablation(teacher: DiT, train: LatentData, val: LatentData, config: DistillConfig, spec: PuppetSpec,
                 vae: PseudoVAE, grid=ABLATION_GRID, eval_size: int = 32, score_cost=None) -> list[dict]:
    """Distill one student per (chunk size, steps) cell from the same teacher and score it."""
    rows = []
    idx = np.arange(min(eval_size, len(val)))
    for chunk, nfe in grid:
        layout = ablation_cell_layout(chunk)
        sigmas = StudentSchedule.uniform(nfe).sigmas
        cfg = DistillConfig(**{**config.__dict__, "sigmas": sigmas})
        state = run_distill(teacher, train, cfg, layout)
        out = student_windows(state.student, val, idx, layout, sigmas, config.seed)
        lo = max(c for c, _ in grid)
        row = {
            "chunk": chunk,
            "steps": nfe,
            "latent_mse": float(np.mean((out[:, lo:] - val.latents[idx, lo:]) ** 2)),
            "sync": window_sync(out, val, idx, vae, spec, lo),
        }
        if score_cost is not None:
            row["score_ms_per_chunk"] = score_cost * nfe * chunk / 3
        rows.append(row)
    return rows
