"""Chunk layout, sparse causal masks and the streaming KV cache.

A query in chunk ``t`` may attend to keys in chunks ``{0, t-1, t}``; attention
inside a chunk is bidirectional. Streaming realizes the same pattern without
masks by attending over ``[reference | previous | current]`` key blocks that
are kept in a :class:`KVCache` holding exactly two chunk roles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from chunkcast.errors import ConfigError, ContractError, StreamingOrderError
from chunkcast.numerics import Tensor, functional as F, no_grad

REFERENCE = "reference"
PREVIOUS = "previous"
ROLES = (REFERENCE, PREVIOUS)


@dataclass(frozen=True)
class ChunkLayout:
    frames_per_chunk: int = 3
    chunks_per_window: int = 7
    frame_tokens: int = 16

    def __post_init__(self):
        if min(self.frames_per_chunk, self.chunks_per_window, self.frame_tokens) <= 0:
            raise ConfigError(f"layout sizes must be positive: {self}")

    @property
    def window_frames(self) -> int:
        return self.frames_per_chunk * self.chunks_per_window

    @property
    def tokens_per_chunk(self) -> int:
        return self.frames_per_chunk * self.frame_tokens

    def chunk_of_frame(self, frame) -> np.ndarray:
        return np.asarray(frame) // self.frames_per_chunk

    def chunk_frames(self, chunk_idx: int) -> np.ndarray:
        start = chunk_idx * self.frames_per_chunk
        return np.arange(start, start + self.frames_per_chunk)


def allowed_key_chunks(t: int) -> set[int]:
    """Chunks visible to queries of chunk ``t``."""
    if t < 0:
        raise ContractError(f"chunk index must be non-negative, got {t}")
    return {0} if t == 0 else {0, t - 1, t}


def build_frame_mask(layout: ChunkLayout) -> np.ndarray:
    """Boolean [frames, frames] version of the sparse causal rule."""
    ch = layout.chunk_of_frame(np.arange(layout.window_frames))
    q, k = ch[:, None], ch[None, :]
    return (k == 0) | (k == q) | (k == q - 1)


def build_sparse_mask(layout: ChunkLayout) -> np.ndarray:
    """Token-level boolean mask of side ``window_frames * frame_tokens``."""
    frame_mask = build_frame_mask(layout)
    n = layout.frame_tokens
    return np.repeat(np.repeat(frame_mask, n, axis=0), n, axis=1)


def full_mask(n_frames: int, frame_tokens: int) -> np.ndarray:
    side = n_frames * frame_tokens
    return np.ones((side, side), dtype=bool)


def is_sparse_causal(mask: np.ndarray | None) -> bool:
    return mask is not None and not bool(np.asarray(mask).all())


def stream_key_frames(chunk_idx: int, layout: ChunkLayout) -> np.ndarray:
    """Global frame indices of the keys attended by ``chunk_idx``, in cache order."""
    parts = [layout.chunk_frames(c) for c in sorted(allowed_key_chunks(chunk_idx))]
    return np.concatenate(parts)


class KVCache:
    """Per-stream cache of key/value blocks and conditioning embeddings.

    Blocks are keyed by ``(layer, step_idx, role)`` with role in
    ``{"reference", "previous"}``. Writing ``previous`` replaces the older
    block; ``reference`` is written once per (layer, step) and is immutable.
    Embeddings are keyed by arbitrary hashable keys and are write-once.
    """

    def __init__(self):
        self._blocks: dict[tuple[int, int, str], tuple[np.ndarray, np.ndarray]] = {}
        self._embeddings: dict[object, object] = {}
        self.writes = 0

    def put(self, layer: int, step_idx: int, role: str, k: np.ndarray, v: np.ndarray) -> "KVCache":
        if role not in ROLES:
            raise ContractError(f"unknown cache role {role!r}")
        if k.shape != v.shape:
            raise ContractError(f"K/V shape mismatch {k.shape} vs {v.shape}")
        key = (layer, step_idx, role)
        if role == REFERENCE and key in self._blocks:
            raise ContractError(f"reference block for layer {layer}, step {step_idx} already written")
        k = np.array(k, copy=True)
        v = np.array(v, copy=True)
        k.flags.writeable = False
        v.flags.writeable = False
        self._blocks[key] = (k, v)
        self.writes += 1
        return self

    def get(self, layer: int, step_idx: int, role: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self._blocks[(layer, step_idx, role)]
        except KeyError:
            raise StreamingOrderError(
                f"cache miss for {role} block at layer {layer}, step {step_idx}; "
                "chunks must be generated in order"
            ) from None

    def has(self, layer: int, step_idx: int, role: str) -> bool:
        return (layer, step_idx, role) in self._blocks

    def put_embedding(self, key, value) -> None:
        if key in self._embeddings:
            raise ContractError(f"embedding {key!r} already cached")
        self._embeddings[key] = value

    def get_embedding(self, key):
        return self._embeddings.get(key)

    def roles_resident(self, layer: int, step_idx: int) -> set[str]:
        return {r for r in ROLES if (layer, step_idx, r) in self._blocks}

    @property
    def kv_nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in self._blocks.values())

    @property
    def embedding_nbytes(self) -> int:
        def size(v):
            if isinstance(v, Tensor):
                return v.data.nbytes
            if isinstance(v, np.ndarray):
                return v.nbytes
            if isinstance(v, (list, tuple)):
                return sum(size(x) for x in v)
            return 0

        return sum(size(v) for v in self._embeddings.values())

    @property
    def nbytes(self) -> int:
        return self.kv_nbytes + self.embedding_nbytes

    def stats(self) -> dict:
        return {
            "kv_bytes": self.kv_nbytes,
            "embedding_bytes": self.embedding_nbytes,
            "blocks": len(self._blocks),
            "writes": self.writes,
        }

    @staticmethod
    def expected_kv_nbytes(layers: int, nfe: int, heads: int, head_dim: int, frames_per_chunk: int,
                           frame_tokens: int, batch: int = 1, itemsize: int = 8) -> int:
        """Steady-state KV footprint: 2 roles x (K, V) per layer and step."""
        per_block = batch * heads * frames_per_chunk * frame_tokens * head_dim * itemsize
        return 2 * 2 * layers * nfe * per_block


def stream_attend(q, cache: KVCache, k_current, v_current, layer: int, step_idx: int,
                  chunk_idx: int, bias=None) -> Tensor:
    """Attention of the current chunk over ``[reference | previous | current]``.

    The sparse pattern is realized by construction, so no mask is applied.
    Chunk 0 is the reference itself and chunk 1's previous chunk *is* the
    reference, so those attend to one and two blocks respectively.
    """
    keys, values = [], []
    if chunk_idx >= 1:
        k, v = cache.get(layer, step_idx, REFERENCE)
        keys.append(k)
        values.append(v)
    if chunk_idx >= 2:
        k, v = cache.get(layer, step_idx, PREVIOUS)
        keys.append(k)
        values.append(v)
    keys.append(k_current)
    values.append(v_current)
    return F.masked_attention(q, F.concat(keys, axis=-2), F.concat(values, axis=-2), None, bias)


NoiseFn = Callable[[int, int], np.ndarray]


def seeded_noise(seed: int, shape: tuple[int, ...]) -> NoiseFn:
    """Deterministic per-(chunk, step) Gaussian noise, independent of generation order."""

    def fn(chunk_idx: int, step_idx: int) -> np.ndarray:
        return np.random.default_rng([seed, chunk_idx, step_idx]).standard_normal(shape)

    return fn


def window_noise(noise_fn: NoiseFn, layout: ChunkLayout, step_idx: int, n_chunks: int | None = None) -> np.ndarray:
    """Stack per-chunk noise along the frame axis (chunk 0 included for shape only)."""
    n = layout.chunks_per_window if n_chunks is None else n_chunks
    return np.concatenate([noise_fn(c, step_idx) for c in range(n)], axis=1)


def stream_generate(model, cond, layout: ChunkLayout, sigmas, noise_fn: NoiseFn, n_chunks: int,
                    cache: KVCache | None = None, on_chunk_start: Callable[[int], None] | None = None,
                    ) -> Iterator[tuple[int, np.ndarray]]:
    """Generate chunks ``1..n_chunks`` autoregressively with few-step denoising.

    ``sigmas`` are the student noise levels (first 1.0). Yields
    ``(chunk_idx, clean latents [B, frames_per_chunk, N, D])``.
    ``on_chunk_start`` runs before each chunk is scored (mode controller hook).
    """
    cache = KVCache() if cache is None else cache
    with no_grad():
        for i, sigma in enumerate(sigmas):
            model.forward_chunk(None, 1.0 - sigma, cond, 0, layout, cache, i)
        for c in range(1, n_chunks + 1):
            if on_chunk_start is not None:
                on_chunk_start(c)
            x = noise_fn(c, 0)
            x1_hat = None
            for i, sigma in enumerate(sigmas):
                t = 1.0 - sigma
                if i > 0:
                    x = t * x1_hat + sigma * noise_fn(c, i)
                u = model.forward_chunk(x, t, cond, c, layout, cache, i)
                x1_hat = x + sigma * u.data
            yield c, x1_hat
