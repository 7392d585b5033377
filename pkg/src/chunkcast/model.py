"""Toy audio-conditioned DiT predicting a velocity field over latent frames.

Tokens are laid out frame-major: ``[B, frames * frame_tokens, model_dim]``.
Positional information is split into a per-token spatial table, a flag for
clean reference frames and a learned self-attention logit bias indexed by
(chunk role, clipped frame offset). The role is *relative* to the querying
chunk (reference / previous / current), so keys computed once can be reused
from a cache and streaming never runs out of positions.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from chunkcast.chunking import ChunkLayout, KVCache, REFERENCE, PREVIOUS, stream_attend, stream_key_frames
from chunkcast.errors import ConditioningError, ConfigError, DimensionError
from chunkcast.numerics import ParamSet, Tensor, functional as F, default_dtype


class Mode(enum.IntEnum):
    SILENCE = 0
    SPEAKING = 1


ROLE_REFERENCE, ROLE_PREVIOUS, ROLE_CURRENT = 0, 1, 2
N_ROLES = 3


@dataclass
class ModelConfig:
    frame_tokens: int = 16
    latent_dim: int = 16
    model_dim: int = 32
    heads: int = 2
    blocks: int = 2
    audio_dim: int = 8
    audio_tokens_per_frame: int = 2
    window_frames: int = 5
    face_token_ids: tuple[int, ...] = (8, 9, 10, 11)
    mlp_ratio: int = 2
    time_features: int = 16
    max_offset: int = 3
    init_seed: int = 0

    def __post_init__(self):
        self.face_token_ids = tuple(int(i) for i in self.face_token_ids)
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.window_frames % 2 == 0 or self.window_frames < 1:
            raise ConfigError("window_frames must be a positive odd number")
        if not self.face_token_ids:
            raise ConfigError("face_token_ids is empty: the model could not lip-sync")
        if any(i < 0 or i >= self.frame_tokens for i in self.face_token_ids):
            raise ConfigError("face_token_ids must lie in [0, frame_tokens)")
        if len(set(self.face_token_ids)) != len(self.face_token_ids):
            raise ConfigError("face_token_ids contains duplicates")
        if self.time_features % 2:
            raise ConfigError("time_features must be even")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def bias_entries(self) -> int:
        return N_ROLES * (2 * self.max_offset + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["face_token_ids"] = list(self.face_token_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars in :class:`DiT` parameters."""
    D, L, N, Da, A, W = cfg.model_dim, cfg.latent_dim, cfg.frame_tokens, cfg.audio_dim, cfg.audio_tokens_per_frame, cfg.window_frames
    H, M, T = cfg.heads, cfg.mlp_ratio * cfg.model_dim, cfg.time_features
    stem = (L * D + D) + N * D + D
    time = (T * D + D) + (D * D + D)
    audio = (Da * D + D) + 2 * (D * D + D) + A * D + W * D
    block = (
        (D * 6 * D + 6 * D)          # adaptive norm modulation
        + (D * 3 * D + 3 * D) + (D * D + D) + H * cfg.bias_entries   # self-attention
        + (D * D + D) + (D * 2 * D + 2 * D) + (D * D + D)            # audio cross-attention
        + (D * M + M) + (M * D + D)                                  # mlp
    )
    head = (D * 2 * D + 2 * D) + (D * L + L)
    return stem + time + audio + cfg.blocks * block + head


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, L, N, Da, A, W = cfg.model_dim, cfg.latent_dim, cfg.frame_tokens, cfg.audio_dim, cfg.audio_tokens_per_frame, cfg.window_frames
    M, T = cfg.mlp_ratio * D, cfg.time_features
    shapes = {
        "in.w": (L, D), "in.b": (D,),
        "pos.spatial": (N, D), "pos.reference": (D,),
        "time.l1.w": (T, D), "time.l1.b": (D,), "time.l2.w": (D, D), "time.l2.b": (D,),
        "audio.l1.w": (Da, D), "audio.l1.b": (D,),
        "audio.l2.w": (D, D), "audio.l2.b": (D,),
        "audio.l3.w": (D, D), "audio.l3.b": (D,),
        "audio.silence": (A, D), "audio.slot": (W, D),
        "out.mod.w": (D, 2 * D), "out.mod.b": (2 * D,),
        "out.w": (D, L), "out.b": (L,),
    }
    for i in range(cfg.blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "mod.w": (D, 6 * D), p + "mod.b": (6 * D,),
            p + "attn.qkv.w": (D, 3 * D), p + "attn.qkv.b": (3 * D,),
            p + "attn.out.w": (D, D), p + "attn.out.b": (D,),
            p + "attn.bias": (cfg.heads, cfg.bias_entries),
            p + "cross.q.w": (D, D), p + "cross.q.b": (D,),
            p + "cross.kv.w": (D, 2 * D), p + "cross.kv.b": (2 * D,),
            p + "cross.out.w": (D, D), p + "cross.out.b": (D,),
            p + "mlp.l1.w": (D, M), p + "mlp.l1.b": (M,),
            p + "mlp.l2.w": (M, D), p + "mlp.l2.b": (D,),
        })
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParamSet:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".b") or name in ("audio.silence",) or name.endswith("attn.bias"):
            params[name] = np.zeros(shape)
        elif name.startswith("pos.") or name == "audio.slot":
            params[name] = 0.02 * rng.standard_normal(shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith("mod.w") or name == "out.w":
                std *= 0.1
            params[name] = std * rng.standard_normal(shape)
    return ParamSet(params)


def is_audio_param(name: str) -> bool:
    """Parameters introduced for audio conditioning (projection stack and cross-attention)."""
    return name.startswith("audio.") or ".cross." in name


def window_indices(frames, window: int, n_frames: int) -> np.ndarray:
    """Audio frame indices for each frame's centered window, clamped at the track edges."""
    frames = np.asarray(frames)
    half = window // 2
    idx = frames[:, None] + np.arange(-half, half + 1)[None, :]
    return np.clip(idx, 0, n_frames - 1)


def bias_index(q_frames, k_frames, ref_len: int, frames_per_chunk: int | None, max_offset: int) -> np.ndarray:
    """[Fq, Fk] index into the per-head (role, offset) bias table.

    Keys on reference frames have role *reference*. Otherwise keys in the
    query's own chunk are *current* and any other chunk is *previous*; with no
    layout (bidirectional models) every non-reference key is *current*.
    """
    q = np.asarray(q_frames)[:, None]
    k = np.asarray(k_frames)[None, :]
    if frames_per_chunk is None:
        role = np.full(np.broadcast_shapes(q.shape, k.shape), ROLE_CURRENT)
    else:
        role = np.where(q // frames_per_chunk == k // frames_per_chunk, ROLE_CURRENT, ROLE_PREVIOUS)
    role = np.where(k < ref_len, ROLE_REFERENCE, role)
    off = np.clip(q - k, -max_offset, max_offset) + max_offset
    return role * (2 * max_offset + 1) + off


@functools.lru_cache(maxsize=64)
def _token_bias_index(q_frames: tuple, k_frames: tuple, ref_len: int, fpc, max_offset: int, n: int) -> np.ndarray:
    idx = bias_index(q_frames, k_frames, ref_len, fpc, max_offset)
    return np.repeat(np.repeat(idx, n, axis=0), n, axis=1)


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of continuous t in [0, 1]; returns [B, dim]."""
    t = np.asarray(t, dtype=default_dtype()).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = 1000.0 * t[:, None] * freqs[None, :] / 10.0
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class Conditioning:
    """Batched conditioning.

    reference: [B, R, N, latent_dim] clean latents of chunk 0.
    audio: [B, frames, A, audio_dim] raw audio tokens.
    modes: [B, frames] of :class:`Mode` values.
    style: optional [B, model_dim] stand-in for a text embedding.
    """

    reference: np.ndarray
    audio: np.ndarray
    modes: np.ndarray
    style: np.ndarray | None = None

    @classmethod
    def single(cls, reference, audio, modes, style=None) -> "Conditioning":
        return cls(
            np.asarray(reference)[None],
            np.asarray(audio)[None],
            np.asarray(modes)[None],
            None if style is None else np.asarray(style)[None],
        )

    @classmethod
    def stack(cls, items: list["Conditioning"]) -> "Conditioning":
        styles = [c.style for c in items]
        if any(s is None for s in styles) and not all(s is None for s in styles):
            raise ConditioningError("cannot stack conditionings with and without style")
        style = None if styles[0] is None else np.concatenate(styles)
        return cls(
            np.concatenate([c.reference for c in items]),
            np.concatenate([c.audio for c in items]),
            np.concatenate([c.modes for c in items]),
            style,
        )

    @property
    def batch(self) -> int:
        return self.reference.shape[0]

    @property
    def ref_len(self) -> int:
        return self.reference.shape[1]

    def select(self, rows) -> "Conditioning":
        return Conditioning(self.reference[rows], self.audio[rows], self.modes[rows],
                            None if self.style is None else self.style[rows])


def _t_array(t, batch: int) -> np.ndarray:
    arr = np.asarray(t, dtype=default_dtype()).reshape(-1)
    if arr.size == 1:
        arr = np.full(batch, float(arr[0]))
    if arr.size != batch:
        raise ConditioningError(f"expected {batch} timesteps, got {arr.size}")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ConditioningError("timesteps must lie in [0, 1]")
    return arr


class DiT:
    """Transformer velocity model ``u(x_t, t, cond)``."""

    def __init__(self, config: ModelConfig, params: ParamSet | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = param_shapes(config)
        got = {k: self.params[k].shape for k in self.params}
        if got != expected:
            raise ConfigError("parameter shapes do not match the model config")

    def clone(self) -> "DiT":
        return DiT(self.config, self.params.copy())

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _lin(self, x, prefix: str) -> Tensor:
        return F.linear(x, self._p(prefix + ".w"), self._p(prefix + ".b"))

    # ---- conditioning paths -------------------------------------------------

    def time_embedding(self, t: np.ndarray, style=None) -> Tensor:
        feats = timestep_features(t, self.config.time_features)
        h = F.silu(self._lin(feats, "time.l1"))
        emb = self._lin(h, "time.l2")
        if style is not None:
            emb = F.add(emb, np.asarray(style, dtype=default_dtype()))
        return emb

    def project_audio(self, raw) -> Tensor:
        """Per-token MLP mapping raw audio tokens [..., audio_dim] to [..., model_dim]."""
        raw = raw if isinstance(raw, Tensor) else np.asarray(raw, dtype=default_dtype())
        if raw.shape[-1] != self.config.audio_dim or raw.shape[-2] != self.config.audio_tokens_per_frame:
            raise DimensionError(f"audio tokens shaped {raw.shape}, expected [..., "
                                 f"{self.config.audio_tokens_per_frame}, {self.config.audio_dim}]")
        h = F.gelu(self._lin(raw, "audio.l1"))
        h = F.gelu(self._lin(h, "audio.l2"))
        return self._lin(h, "audio.l3")

    def condition_audio(self, raw, modes) -> Tensor:
        """Project, then substitute the silence embedding for Silence-mode frames."""
        proj = self.project_audio(raw)
        speaking = (np.asarray(modes) == Mode.SPEAKING).astype(default_dtype())[..., None, None]
        return F.add(F.mul(proj, speaking), F.mul(self._p("audio.silence"), 1.0 - speaking))

    def align_audio_window(self, audio, frame_idx: int) -> Tensor:
        """Concatenate the projected audio tokens of the window around ``frame_idx``.

        ``audio`` is [frames, A, D] (or batched [B, frames, A, D]); returns
        [window * A, D] (batched: [B, window * A, D]).
        """
        audio = audio if isinstance(audio, Tensor) else Tensor(audio)
        axis = audio.ndim - 3
        n = audio.shape[axis]
        if not 0 <= frame_idx < n:
            raise IndexError(f"frame_idx {frame_idx} outside [0, {n})")
        idx = window_indices([frame_idx], self.config.window_frames, n)[0]
        win = F.take(audio, idx, axis=axis)
        shape = audio.shape[:axis] + (self.config.window_frames * audio.shape[-2], audio.shape[-1])
        return F.reshape(win, shape)

    def audio_context(self, cond: Conditioning, frames: np.ndarray) -> Tensor:
        """Windowed audio keys/values source for ``frames``: [B, len(frames), W*A, D]."""
        cfg = self.config
        n_track = cond.audio.shape[1]
        idx = window_indices(frames, cfg.window_frames, n_track)
        uniq, inverse = np.unique(idx, return_inverse=True)
        conditioned = self.condition_audio(cond.audio[:, uniq], cond.modes[:, uniq])
        win = F.take(conditioned, inverse.reshape(idx.shape), axis=1)       # [B, Fq, W, A, D]
        win = F.add(win, F.reshape(self._p("audio.slot"), (cfg.window_frames, 1, cfg.model_dim)))
        B = cond.audio.shape[0]
        return F.reshape(win, (B, len(frames), cfg.window_frames * cfg.audio_tokens_per_frame, cfg.model_dim))

    # ---- building blocks ----------------------------------------------------

    def _cross_residual(self, prefix: str, tokens: Tensor, aligned: Tensor, face_ids) -> Tensor:
        """Audio cross-attention update for face tokens, zero elsewhere.

        tokens: [..., N, D]; aligned: [..., W*A, D].
        """
        cfg = self.config
        H, dh, D = cfg.heads, cfg.head_dim, cfg.model_dim
        lead = tokens.shape[:-2]
        n_face = len(face_ids)
        face = F.take(tokens, face_ids, axis=-2)
        nd = len(lead)
        q = F.reshape(self._lin(face, prefix + ".q"), lead + (n_face, H, dh))
        q = F.transpose(q, tuple(range(nd)) + (nd + 1, nd, nd + 2))
        n_ctx = aligned.shape[-2]
        kv = F.reshape(self._lin(aligned, prefix + ".kv"), lead + (n_ctx, 2, H, dh))
        kv = F.transpose(kv, (nd + 1,) + tuple(range(nd)) + (nd + 2, nd, nd + 3))
        o = F.masked_attention(q, kv[0], kv[1])
        o = F.reshape(F.transpose(o, tuple(range(nd)) + (nd + 1, nd, nd + 2)), lead + (n_face, D))
        return F.scatter(self._lin(o, prefix + ".out"), face_ids, axis=-2, size=tokens.shape[-2])

    def audio_cross_attention(self, frame_tokens_in, aligned_audio, face_query_mask, block: int = 0) -> Tensor:
        """Residual audio cross-attention restricted to face-token queries.

        Non-face tokens pass through unchanged (bitwise).
        """
        face_ids = np.flatnonzero(np.asarray(face_query_mask, dtype=bool))
        if face_ids.size == 0:
            raise ConfigError("empty face query mask")
        x = frame_tokens_in if isinstance(frame_tokens_in, Tensor) else Tensor(frame_tokens_in)
        a = aligned_audio if isinstance(aligned_audio, Tensor) else Tensor(aligned_audio)
        return F.add(x, self._cross_residual(f"blocks.{block}.cross", x, a, face_ids))

    def _modulations(self, temb: Tensor) -> list[list[Tensor]]:
        c = F.silu(temb)
        D = self.config.model_dim
        mods = []
        for i in range(self.config.blocks):
            m = self._lin(c, f"blocks.{i}.mod")
            m = F.reshape(m, (m.shape[0], 1, 6 * D))
            mods.append([m[:, :, j * D:(j + 1) * D] for j in range(6)])
        m = F.reshape(self._lin(c, "out.mod"), (c.shape[0], 1, 2 * D))
        mods.append([m[:, :, :D], m[:, :, D:]])
        return mods

    @staticmethod
    def _modln(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return F.add(F.mul(F.layer_norm(h), F.add(scale, 1.0)), shift)

    def _embed(self, x, frames: np.ndarray, ref_len: int) -> Tensor:
        """[B, Fq, N, L] latents -> [B, Fq*N, D] tokens."""
        cfg = self.config
        h = self._lin(x, "in")
        h = F.add(h, self._p("pos.spatial"))
        flag = (np.asarray(frames) < ref_len).astype(default_dtype())[None, :, None, None]
        if flag.any():
            h = F.add(h, F.mul(self._p("pos.reference"), flag))
        B = h.shape[0]
        return F.reshape(h, (B, len(frames) * cfg.frame_tokens, cfg.model_dim))

    def _qkv(self, prefix: str, a: Tensor):
        cfg = self.config
        B, Lq = a.shape[0], a.shape[1]
        qkv = F.reshape(self._lin(a, prefix + ".qkv"), (B, Lq, 3, cfg.heads, cfg.head_dim))
        qkv = F.transpose(qkv, (2, 0, 3, 1, 4))
        return qkv[0], qkv[1], qkv[2]

    def _attn_out(self, prefix: str, o: Tensor) -> Tensor:
        B, H, Lq, dh = o.shape
        o = F.reshape(F.transpose(o, (0, 2, 1, 3)), (B, Lq, H * dh))
        return self._lin(o, prefix + ".out")

    def _block_tail(self, i: int, h: Tensor, mods, aligned: Tensor, n_frames: int) -> Tensor:
        cfg = self.config
        B = h.shape[0]
        c_in = self._modln(h, mods[2], mods[3])
        c_in = F.reshape(c_in, (B, n_frames, cfg.frame_tokens, cfg.model_dim))
        res = self._cross_residual(f"blocks.{i}.cross", c_in, aligned, np.asarray(cfg.face_token_ids))
        h = F.add(h, F.reshape(res, h.shape))
        m = self._modln(h, mods[4], mods[5])
        m = F.gelu(self._lin(m, f"blocks.{i}.mlp.l1"))
        return F.add(h, self._lin(m, f"blocks.{i}.mlp.l2"))

    def _head(self, h: Tensor, mods, n_frames: int) -> Tensor:
        cfg = self.config
        out = self._lin(self._modln(h, mods[0], mods[1]), "out")
        return F.reshape(out, (h.shape[0], n_frames, cfg.frame_tokens, cfg.latent_dim))

    # ---- public forward paths ----------------------------------------------

    def _check_cond(self, cond: Conditioning, n_frames: int, batch: int) -> None:
        cfg = self.config
        if cond.audio.ndim != 4 or cond.audio.shape[0] != batch:
            raise ConditioningError(f"audio shaped {cond.audio.shape} for batch {batch}")
        if cond.audio.shape[1] != n_frames:
            raise ConditioningError(f"audio has {cond.audio.shape[1]} frames, latents have {n_frames}")
        if cond.modes.shape != (batch, n_frames):
            raise ConditioningError(f"mode flags shaped {cond.modes.shape}, expected {(batch, n_frames)}")
        if cond.reference.shape[0] != batch or cond.reference.shape[2:] != (cfg.frame_tokens, cfg.latent_dim):
            raise ConditioningError(f"reference shaped {cond.reference.shape}")
        if cond.ref_len > n_frames:
            raise ConditioningError("reference longer than the latent window")

    def forward_velocity(self, x_t, t, cond: Conditioning, self_mask: np.ndarray | None = None,
                         layout: ChunkLayout | None = None) -> Tensor:
        """Predict the velocity for every latent token of a window.

        x_t: [B, F, N, latent_dim] (or unbatched [F, N, latent_dim]).
        t: one timestep per sample, shared by all of its frames.
        self_mask: boolean [F*N, F*N] or None for full attention.
        layout: chunk layout defining previous/current roles (None: bidirectional).
        The first ``cond.ref_len`` frames are replaced by the clean reference.
        """
        cfg = self.config
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        squeeze = x.ndim == 3
        if squeeze:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[2:] != (cfg.frame_tokens, cfg.latent_dim):
            raise DimensionError(f"latents shaped {x_t.shape}")
        B, Fn = x.shape[0], x.shape[1]
        self._check_cond(cond, Fn, B)
        side = Fn * cfg.frame_tokens
        if self_mask is not None and np.shape(self_mask) != (side, side):
            raise DimensionError(f"self mask shaped {np.shape(self_mask)}, expected {(side, side)}")
        t = _t_array(t, B)
        R = cond.ref_len
        if R:
            x = F.concat([Tensor(cond.reference), x[:, R:]], axis=1)
        frames = np.arange(Fn)
        h = self._embed(x, frames, R)
        mods = self._modulations(self.time_embedding(t, cond.style))
        aligned = self.audio_context(cond, frames)
        fpc = None if layout is None else layout.frames_per_chunk
        bidx = _token_bias_index(tuple(frames), tuple(frames), R, fpc, cfg.max_offset, cfg.frame_tokens)
        for i in range(cfg.blocks):
            bm = mods[i]
            q, k, v = self._qkv(f"blocks.{i}.attn", self._modln(h, bm[0], bm[1]))
            bias = F.take(self._p(f"blocks.{i}.attn.bias"), bidx, axis=1)
            o = F.masked_attention(q, k, v, self_mask, bias)
            h = F.add(h, self._attn_out(f"blocks.{i}.attn", o))
            h = self._block_tail(i, h, bm, aligned, Fn)
        out = self._head(h, mods[-1], Fn)
        return F.reshape(out, out.shape[1:]) if squeeze else out

    velocity = forward_velocity

    def forward_chunk(self, x_chunk, t: float, cond: Conditioning, chunk_idx: int, layout: ChunkLayout,
                      cache: KVCache, step_idx: int) -> Tensor:
        """Streaming forward for one chunk at one denoise step.

        Chunk 0 is the clean reference: its K/V are computed from
        ``cond.reference`` and written to the cache once per step.
        Later chunks attend over cached [reference | previous] blocks plus
        themselves; their K/V then become the new *previous* block.
        """
        cfg = self.config
        fpc = layout.frames_per_chunk
        if cond.ref_len != fpc:
            raise ConditioningError("streaming needs the reference to fill chunk 0 exactly")
        frames = layout.chunk_frames(chunk_idx)
        x = cond.reference if chunk_idx == 0 else np.asarray(x_chunk, dtype=default_dtype())
        B = cond.batch
        if x.shape != (B, fpc, cfg.frame_tokens, cfg.latent_dim):
            raise DimensionError(f"chunk latents shaped {x.shape}")
        if frames[-1] >= cond.audio.shape[1]:
            raise ConditioningError(f"audio track too short for chunk {chunk_idx}")
        h = self._embed(x, frames, fpc)
        key = ("mods", step_idx)
        mods = cache.get_embedding(key)
        if mods is None:
            mods = self._modulations(self.time_embedding(_t_array(t, B), cond.style))
            cache.put_embedding(key, mods)
        aligned = self.audio_context(cond, frames)
        kframes = stream_key_frames(chunk_idx, layout)
        bidx = _token_bias_index(tuple(frames), tuple(kframes), fpc, fpc, cfg.max_offset, cfg.frame_tokens)
        staged = []
        for i in range(cfg.blocks):
            bm = mods[i]
            q, k, v = self._qkv(f"blocks.{i}.attn", self._modln(h, bm[0], bm[1]))
            bias = F.take(self._p(f"blocks.{i}.attn.bias"), bidx, axis=1)
            o = stream_attend(q, cache, k.data, v.data, i, step_idx, chunk_idx, bias)
            staged.append((k.data, v.data))
            h = F.add(h, self._attn_out(f"blocks.{i}.attn", o))
            h = self._block_tail(i, h, bm, aligned, fpc)
        role = REFERENCE if chunk_idx == 0 else PREVIOUS
        for i, (k, v) in enumerate(staged):
            cache.put(i, step_idx, role, k, v)
        return self._head(h, mods[-1], fpc)

    def pin(self, x, cond: Conditioning | None):
        """Overwrite the reference frames of a generated window with the clean reference."""
        if cond is None or cond.ref_len == 0:
            return x
        R = cond.ref_len
        if isinstance(x, Tensor):
            return F.concat([Tensor(cond.reference), x[:, R:]], axis=1)
        out = np.array(x, copy=True)
        out[:, :R] = cond.reference
        return out


class MLPVelocity:
    """Two-hidden-layer MLP velocity field for vector data ``x: [B, dim]``."""

    def __init__(self, dim: int = 1, hidden: int = 64, time_features: int = 16, seed: int = 0,
                 params: ParamSet | None = None):
        self.dim, self.hidden, self.time_features = dim, hidden, time_features
        if params is None:
            rng = np.random.default_rng(seed)
            fan = dim + time_features
            params = ParamSet({
                "l1.w": rng.standard_normal((fan, hidden)) / math.sqrt(fan), "l1.b": np.zeros(hidden),
                "l2.w": rng.standard_normal((hidden, hidden)) / math.sqrt(hidden), "l2.b": np.zeros(hidden),
                "l3.w": 0.1 * rng.standard_normal((hidden, dim)) / math.sqrt(hidden), "l3.b": np.zeros(dim),
            })
        self.params = params

    def clone(self) -> "MLPVelocity":
        return MLPVelocity(self.dim, self.hidden, self.time_features, params=self.params.copy())

    def velocity(self, x, t, cond=None, self_mask=None, layout=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        feats = timestep_features(_t_array(t, x.shape[0]), self.time_features)
        h = F.concat([x, Tensor(feats)], axis=1)
        h = F.gelu(F.linear(h, self.params["l1.w"], self.params["l1.b"]))
        h = F.gelu(F.linear(h, self.params["l2.w"], self.params["l2.b"]))
        return F.linear(h, self.params["l3.w"], self.params["l3.b"])

    forward_velocity = velocity

    def pin(self, x, cond=None):
        return x
