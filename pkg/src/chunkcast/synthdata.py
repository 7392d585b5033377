"""Puppet audio-video clips with analytic ground truth, a pseudo-VAE and the sync oracle.

A puppet frame is a 16x16 grid: a head blob that sways horizontally, two
eyes, a mouth band whose total intensity equals the audio amplitude while
speaking, and a static body. Mouth openness is the mouth-band mass divided by
the mouth width, which makes it sway-invariant and exactly equal to the
amplitude on ground-truth frames.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from chunkcast.errors import ConfigError, ContractError, DimensionError, UndefinedCorrelationError
from chunkcast.model import Mode
from chunkcast.numerics.serialize import load_tensor, save_tensor
from chunkcast.timing import pad_to_cost

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class PuppetSpec:
    grid: tuple[int, int] = (16, 16)
    mouth_rows: tuple[int, int] = (9, 11)  # half-open row range
    sway_amplitude: float = 1.5
    sway_period: float = 14.0
    audio_rate: int = 2  # audio tokens per frame
    audio_dim: int = 8
    frames: int = 21
    patch: int = 4
    mouth_width: float = 8.0
    mouth_sigma: float = 1.2
    audio_noise: float = 0.02
    seed: int = 0  # fixes the audio projection shared by all clips

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "mouth_rows", tuple(int(r) for r in self.mouth_rows))
        H, W = self.grid
        r0, r1 = self.mouth_rows
        if H < 16 or W < 8:
            raise ConfigError(f"grid {self.grid} too small for the puppet layout")
        if H % self.patch or W % self.patch:
            raise ConfigError(f"grid {self.grid} not divisible by patch {self.patch}")
        if not 0 <= r0 < r1 <= H:
            raise ConfigError(f"mouth_rows {self.mouth_rows} outside the grid")
        if r0 < 9 or r1 > 12:
            raise ConfigError("mouth rows must sit between the head (rows 1-8) and the body (rows 12+)")
        if self.frames < 1 or self.audio_rate < 1 or self.audio_dim < 1:
            raise ConfigError("frames, audio_rate and audio_dim must be positive")
        if self.mouth_width <= 0 or self.mouth_sigma <= 0 or self.sway_period <= 0:
            raise ConfigError("mouth_width, mouth_sigma and sway_period must be positive")

    @property
    def frame_tokens(self) -> int:
        return (self.grid[0] // self.patch) * (self.grid[1] // self.patch)

    @property
    def latent_dim(self) -> int:
        return self.patch * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PuppetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown PuppetSpec keys {sorted(unknown)}")
        return cls(**d)


def face_token_ids(spec: PuppetSpec) -> tuple[int, ...]:
    """Latent tokens (raster patch order) whose patches overlap the mouth rows."""
    cols = spec.grid[1] // spec.patch
    rows = range(spec.mouth_rows[0] // spec.patch, (spec.mouth_rows[1] - 1) // spec.patch + 1)
    return tuple(r * cols + c for r in rows for c in range(cols))


def check_face_tokens(spec: PuppetSpec, model_face_ids) -> None:
    if tuple(sorted(model_face_ids)) != face_token_ids(spec):
        raise ConfigError(f"model face tokens {tuple(model_face_ids)} do not cover mouth rows "
                          f"{spec.mouth_rows} (expected {face_token_ids(spec)})")


@dataclass
class Clip:
    frames: np.ndarray  # [F, H, W]
    audio: np.ndarray  # [F, A, audio_dim]
    modes: np.ndarray  # [F] Mode values
    amplitude: np.ndarray  # [F]
    spec: PuppetSpec = field(default_factory=PuppetSpec)
    seed: int = 0
    synthetic: bool = False

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def audio_projection(spec: PuppetSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0xA0D10])
    P = rng.standard_normal((spec.audio_rate, spec.audio_dim))
    return P / np.linalg.norm(P)


def amplitude_envelope(rng: np.random.Generator, frames: int) -> np.ndarray:
    raw = rng.uniform(0.0, 1.0, frames + 2)
    smooth = np.convolve(raw, [0.25, 0.5, 0.25], mode="valid")
    return 0.1 + 0.9 * smooth


def render_frames(spec: PuppetSpec, amplitude, modes, head_x) -> np.ndarray:
    """Draw puppet frames; Silence frames get a closed mouth."""
    H, W = spec.grid
    amplitude = np.asarray(amplitude, dtype=float)
    modes = np.asarray(modes)
    head_x = np.asarray(head_x, dtype=float)
    n = amplitude.shape[0]
    if modes.shape != (n,) or head_x.shape != (n,):
        raise DimensionError("amplitude, modes and head_x must have one entry per frame")
    x = np.arange(W, dtype=float)[None, :]
    cx = head_x[:, None]
    out = np.zeros((n, H, W))
    head = 1.5 * np.exp(-((x - cx) ** 2) / (2 * 2.2**2))
    out[:, 1:9, :] = head[:, None, :]
    eyes = 1.2 * (np.exp(-((x - cx + 2) ** 2) / 0.72) + np.exp(-((x - cx - 2) ** 2) / 0.72))
    out[:, 4, :] -= eyes
    profile = np.exp(-((x - cx) ** 2) / (2 * spec.mouth_sigma**2))
    profile *= spec.mouth_width / profile.sum(axis=1, keepdims=True)
    open_ = np.where(modes == Mode.SPEAKING, amplitude, 0.0)
    r0, r1 = spec.mouth_rows
    out[:, r0:r1, :] = (open_[:, None] * profile)[:, None, :]
    out[:, 12:16, W // 4 : W - W // 4] = 0.9
    return out


def head_positions(spec: PuppetSpec, phase: float, frames: int) -> np.ndarray:
    f = np.arange(frames)
    return (spec.grid[1] - 1) / 2 + spec.sway_amplitude * np.sin(2 * np.pi * f / spec.sway_period + phase)


def generate_clip(spec: PuppetSpec, seed: int, modes=None) -> Clip:
    """Deterministic puppet clip; ``modes`` defaults to all Speaking."""
    F = spec.frames
    modes = np.full(F, Mode.SPEAKING, dtype=np.int8) if modes is None else np.asarray(modes, dtype=np.int8)
    if modes.shape != (F,):
        raise DimensionError(f"modes shaped {modes.shape}, expected ({F},)")
    rng = np.random.default_rng(seed)
    amplitude = amplitude_envelope(rng, F)
    phase = rng.uniform(0.0, 2 * np.pi)
    frames = render_frames(spec, amplitude, modes, head_positions(spec, phase, F))
    noise = rng.standard_normal((F, spec.audio_rate, spec.audio_dim))
    audio = amplitude[:, None, None] * audio_projection(spec)[None] + spec.audio_noise * noise
    return Clip(frames, audio, modes, amplitude, spec, int(seed))


def sample_modes(rng: np.random.Generator, frames: int, p_speaking: float = 0.6,
                 p_silence: float = 0.15) -> np.ndarray:
    """Training mode mix: all Speaking, all Silence, or one switch at a random frame."""
    u = rng.uniform()
    if u < p_speaking:
        return np.full(frames, Mode.SPEAKING, dtype=np.int8)
    if u < p_speaking + p_silence:
        return np.full(frames, Mode.SILENCE, dtype=np.int8)
    cut = int(rng.integers(1, frames))
    first = Mode.SPEAKING if rng.uniform() < 0.5 else Mode.SILENCE
    modes = np.full(frames, first, dtype=np.int8)
    modes[cut:] = 1 - first
    return modes


def mouth_openness(frame, spec: PuppetSpec | None = None):
    """Mouth-band mass over mouth width; works on [H, W] or stacked [..., H, W]."""
    spec = spec or PuppetSpec()
    frame = np.asarray(frame, dtype=float)
    if frame.shape[-2:] != spec.grid:
        raise DimensionError(f"frame shaped {frame.shape}, grid is {spec.grid}")
    r0, r1 = spec.mouth_rows
    band = frame[..., r0:r1, :]
    openness = band.sum(axis=(-2, -1)) / ((r1 - r0) * spec.mouth_width)
    return float(openness) if np.ndim(openness) == 0 else openness


def sync_score(frames, amplitude, modes, spec: PuppetSpec | None = None, select: int = Mode.SPEAKING,
               min_frames: int = 8) -> float:
    """Pearson correlation of amplitude and mouth openness over frames in mode ``select``."""
    amplitude = np.asarray(amplitude, dtype=float)
    modes = np.asarray(modes)
    openness = mouth_openness(frames, spec)
    if not (amplitude.shape == modes.shape == np.shape(openness)):
        raise DimensionError("frames, amplitude and modes must have one entry per frame")
    keep = modes == select
    if keep.sum() < min_frames:
        raise ContractError(f"need >= {min_frames} frames in mode {Mode(select).name}, got {int(keep.sum())}")
    a, o = amplitude[keep], openness[keep]
    if np.ptp(a) == 0 or np.ptp(o) == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    return float(np.clip(np.corrcoef(a, o)[0, 1], -1.0, 1.0))


class PseudoVAE:
    """Per-patch orthogonal map between pixel frames and latent tokens.

    Tokens are patches in raster order; each patch of ``patch*patch`` pixels
    maps to a latent vector through one seeded orthogonal matrix, so the
    whole frame map is block-diagonal orthogonal.
    """

    def __init__(self, spec: PuppetSpec | None = None, seed: int = 0, simulated_decode_cost_ms: float = 0.0):
        self.spec = spec or PuppetSpec()
        self.seed = seed
        self.simulated_decode_cost_ms = float(simulated_decode_cost_ms)
        d = self.spec.latent_dim
        a = np.random.default_rng([seed, 0x5AE]).standard_normal((d, d))
        q, r = np.linalg.qr(a)
        self.matrix = q * np.sign(np.diag(r))[None, :]

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        H, W = self.spec.grid
        p = self.spec.patch
        if frames.shape[-2:] != (H, W):
            raise DimensionError(f"frames shaped {frames.shape}, grid is {(H, W)}")
        lead = frames.shape[:-2]
        x = frames.reshape(lead + (H // p, p, W // p, p))
        x = np.swapaxes(x, -3, -2)
        return x.reshape(lead + ((H // p) * (W // p), p * p))

    def _unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        H, W = self.spec.grid
        p = self.spec.patch
        lead = tokens.shape[:-2]
        x = tokens.reshape(lead + (H // p, W // p, p, p))
        x = np.swapaxes(x, -3, -2)
        return x.reshape(lead + (H, W))

    def encode(self, frames) -> np.ndarray:
        """[..., H, W] pixels -> [..., tokens, latent_dim]."""
        return self._patchify(np.asarray(frames, dtype=float)) @ self.matrix.T

    def decode(self, latents) -> np.ndarray:
        start = time.perf_counter()
        latents = np.asarray(latents, dtype=float)
        if latents.shape[-2:] != (self.spec.frame_tokens, self.spec.latent_dim):
            raise DimensionError(f"latents shaped {latents.shape}")
        out = self._unpatchify(latents @ self.matrix)
        pad_to_cost(start, self.simulated_decode_cost_ms)
        return out


# ---- dataset IO -------------------------------------------------------------

def _clip_paths(directory: Path, name: str) -> tuple[Path, Path, Path]:
    return directory / f"{name}.frames.cstn", directory / f"{name}.audio.cstn", directory / f"{name}.json"


def save_clip(directory, name: str, clip: Clip) -> str:
    """Write a clip as two tensor files plus a JSON sidecar; returns a content checksum."""
    directory = Path(directory)
    fpath, apath, mpath = _clip_paths(directory, name)
    save_tensor(fpath, clip.frames)
    save_tensor(apath, clip.audio)
    meta = {
        "modes": [int(m) for m in clip.modes],
        "amplitude": [float(a) for a in clip.amplitude],
        "spec": clip.spec.to_dict(),
        "seed": clip.seed,
        "synthetic": clip.synthetic,
    }
    mpath.write_text(json.dumps(meta, sort_keys=True))
    h = hashlib.sha256()
    for p in (fpath, apath, mpath):
        h.update(p.read_bytes())
    return h.hexdigest()


def load_clip(directory, name: str) -> Clip:
    fpath, apath, mpath = _clip_paths(Path(directory), name)
    meta = json.loads(mpath.read_text())
    return Clip(
        load_tensor(fpath),
        load_tensor(apath),
        np.asarray(meta["modes"], dtype=np.int8),
        np.asarray(meta["amplitude"], dtype=float),
        PuppetSpec.from_dict(meta["spec"]),
        int(meta["seed"]),
        bool(meta.get("synthetic", False)),
    )


def clip_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def generate_dataset(spec: PuppetSpec, n_clips: int, seed: int, val_fraction: float = 0.1) -> list[tuple[str, Clip, str]]:
    """In-memory dataset: (name, clip, split) triples, deterministic under seed."""
    rng = np.random.default_rng([seed, 0xD5])
    n_val = int(round(n_clips * val_fraction))
    out = []
    for i in range(n_clips):
        modes = sample_modes(rng, spec.frames)
        clip = generate_clip(spec, clip_seed(seed, i), modes)
        out.append((f"clip{i:05d}", clip, "val" if i >= n_clips - n_val else "train"))
    return out


def write_dataset(directory, spec: PuppetSpec, n_clips: int, seed: int, force: bool = False,
                  val_fraction: float = 0.1) -> Path:
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise ConfigError(f"output directory {directory} is not empty (use --force)")
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, clip, split in generate_dataset(spec, n_clips, seed, val_fraction):
        checksum = save_clip(directory, name, clip)
        entries.append({"name": name, "split": split, "sha256": checksum})
    manifest = {"format": "chunkcast-dataset", "version": 1, "spec": spec.to_dict(), "seed": seed,
                "clips": entries}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(directory, split: str | None = None) -> list[Clip]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    return [load_clip(directory, e["name"]) for e in manifest["clips"] if split is None or e["split"] == split]
