"""Streaming inference: score stage, decoder stage and the TTBC recorder."""

from __future__ import annotations

import threading
import time
from typing import Callable

import numpy as np

from chunkcast.chunking import ChunkLayout, KVCache, seeded_noise, stream_generate
from chunkcast.errors import ConfigError, InvariantViolation
from chunkcast.model import Conditioning, Mode
from chunkcast.numerics.serialize import tensor_to_bytes
from chunkcast.pipeline.modes import ModeController
from chunkcast.pipeline.report import TTBCReport
from chunkcast.pipeline.topology import Topology
from chunkcast.pipeline.transport import make_transport
from chunkcast.synthdata import PseudoVAE
from chunkcast.timing import fine_switch_interval, pad_to_cost


class StreamSession:
    """One talking-head stream: model, reference chunk, audio track, cache and mode controller.

    ``reference``: clean latents of chunk 0, [frames_per_chunk, N, L].
    ``audio``: raw audio tokens for the whole stream, [T, A, audio_dim],
    covering chunk 0 plus every generated chunk.
    """

    def __init__(self, model, reference, audio, layout: ChunkLayout | None = None, sigmas=(1.0, 0.5),
                 vae: PseudoVAE | None = None, seed: int = 0, controller: ModeController | None = None,
                 style=None):
        self.model = model
        self.layout = layout or ChunkLayout()
        self.sigmas = tuple(sigmas)
        self.vae = vae or PseudoVAE()
        self.seed = seed
        self.controller = controller or ModeController()
        self.cache = KVCache()
        reference = np.asarray(reference, dtype=float)
        audio = np.asarray(audio, dtype=float)
        fpc = self.layout.frames_per_chunk
        if reference.shape[0] != fpc:
            raise ConfigError(f"reference must hold {fpc} frames, got {reference.shape[0]}")
        self.modes = np.full((1, audio.shape[0]), int(self.controller.mode_for(0)), dtype=np.int8)
        self.cond = Conditioning(reference[None], audio[None], self.modes,
                                 None if style is None else np.asarray(style)[None])
        self._refresh_modes(0)
        self.started = False

    @property
    def max_chunks(self) -> int:
        return self.cond.audio.shape[1] // self.layout.frames_per_chunk - 1

    def _refresh_modes(self, chunk_idx: int) -> None:
        """Write controller modes for this chunk and every later frame of the track."""
        fpc = self.layout.frames_per_chunk
        T = self.modes.shape[1]
        for c in range(chunk_idx, (T + fpc - 1) // fpc):
            self.modes[0, c * fpc : (c + 1) * fpc] = int(self.controller.mode_for(c))

    def begin_chunk(self, chunk_idx: int) -> Mode:
        mode = self.controller.begin_chunk(chunk_idx)
        self._refresh_modes(chunk_idx)
        return mode

    def generate(self, n_chunks: int, on_chunk_start: Callable[[int], None] | None = None):
        """Yield ``(chunk_idx, latents [fpc, N, L])`` for chunks 1..n_chunks."""
        if self.started:
            raise ConfigError("a session streams once; create a new session")
        if n_chunks > self.max_chunks:
            raise ConfigError(f"audio track covers {self.max_chunks} chunks, asked for {n_chunks}")
        self.started = True
        cfg = self.cond.reference.shape
        shape = (1, self.layout.frames_per_chunk) + cfg[2:]
        noise = seeded_noise(self.seed, shape)

        def start(c):
            self.begin_chunk(c)
            if on_chunk_start is not None:
                on_chunk_start(c)

        for c, x in stream_generate(self.model, self.cond, self.layout, self.sigmas, noise, n_chunks,
                                    self.cache, on_chunk_start=start):
            yield c, x[0]


class _Recorder:
    """Sole writer of stage timestamps."""

    def __init__(self, n: int, t0: float):
        self.t0 = t0
        self.ready = [np.nan] * n
        self.done = [np.nan] * n
        self.emitted = [np.nan] * n
        self.stall = 0.0
        self.last_emitted = 0
        self._lock = threading.Lock()

    def mark(self, which: str, chunk_idx: int, when: float) -> None:
        with self._lock:
            getattr(self, which)[chunk_idx - 1] = when - self.t0

    def emit(self, chunk_idx: int, when: float) -> None:
        with self._lock:
            if chunk_idx != self.last_emitted + 1:
                raise InvariantViolation(f"chunk {chunk_idx} emitted after chunk {self.last_emitted}")
            self.last_emitted = chunk_idx
            self.emitted[chunk_idx - 1] = when - self.t0

    def add_stall(self, seconds: float) -> None:
        with self._lock:
            self.stall += seconds


def run_stream(topology: Topology, session: StreamSession, n_chunks: int, sink=None,
               transport: str = "queue") -> TTBCReport:
    """Stream ``n_chunks`` chunks through ``topology`` and time every stage.

    Real compute is padded up to the modeled cost of each stage. In
    disaggregated topologies a decoder thread receives latents through a
    bounded transport, so scoring of the next chunk overlaps decoding.
    ``sink`` is a list (decoded frames are appended) or a callable
    ``sink(chunk_idx, frames)``.
    """
    if n_chunks < 2:
        raise ConfigError("n_chunks must be >= 2")
    cost = topology.cost
    if len(session.sigmas) != cost.steps:
        raise ConfigError(f"cost model has {cost.steps} steps, session schedule has {len(session.sigmas)}")
    vae = session.vae
    vae.simulated_decode_cost_ms = cost.decode_ms
    if isinstance(sink, list):
        frames_out = sink
        sink = lambda c, frames: frames_out.append((c, frames))  # noqa: E731
    errors: list[BaseException] = []
    t0 = time.perf_counter()
    rec = _Recorder(n_chunks, t0)

    def emit(c: int, frames: np.ndarray) -> None:
        now = time.perf_counter()
        rec.emit(c, now)
        session.controller.mark_emitted(c)
        if sink is not None:
            sink(c, frames)

    def decode_and_emit(c: int, latents: np.ndarray) -> None:
        frames = vae.decode(latents)
        rec.mark("done", c, time.perf_counter())
        start = time.perf_counter()
        tensor_to_bytes(frames)  # device-to-host copy stand-in
        pad_to_cost(start, cost.transfer_ms)
        emit(c, frames)

    def transfer_decode_emit(c: int, latents: np.ndarray) -> None:
        start = time.perf_counter()
        pad_to_cost(start, cost.transfer_ms)
        frames = vae.decode(latents)
        now = time.perf_counter()
        rec.mark("done", c, now)
        emit(c, frames)

    link = make_transport(transport, topology.queue_depth) if topology.disaggregated else None
    chunk_start = [0.0]
    abort = threading.Event()

    def on_start(c: int) -> None:
        chunk_start[0] = time.perf_counter()

    def score_stage() -> None:
        try:
            for c, latents in session.generate(n_chunks, on_start):
                if abort.is_set():
                    break
                end = pad_to_cost(chunk_start[0], topology.score_ms)
                rec.mark("ready", c, end)
                if link is None:
                    decode_and_emit(c, latents)
                else:
                    rec.add_stall(link.put(c, cost.steps, latents))
        except BaseException as exc:  # noqa: BLE001 - reported through the partial report
            errors.append(exc)
        finally:
            if link is not None:
                link.close()

    def decoder_stage() -> None:
        while True:
            item = link.get()
            if item is None:
                return
            if abort.is_set():
                continue  # keep draining so the score stage never blocks
            c, _, latents = item
            try:
                transfer_decode_emit(c, latents)
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)
                abort.set()

    threads = [threading.Thread(target=score_stage, name="score")]
    if link is not None:
        threads.append(threading.Thread(target=decoder_stage, name="decoder"))
    with fine_switch_interval():
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if link is not None and hasattr(link, "shutdown"):
        link.shutdown()

    report = TTBCReport(
        case=topology.case.value,
        chunk_ready=[x for x in rec.ready if not np.isnan(x)],
        decode_done=[x for x in rec.done if not np.isnan(x)],
        emitted=[x for x in rec.emitted if not np.isnan(x)],
        stalls_ms=1000.0 * rec.stall,
        cache_stats=session.cache.stats(),
    )
    for exc in errors:
        if isinstance(exc, InvariantViolation):
            raise exc
    if errors:
        report.aborted = f"{type(errors[0]).__name__}: {errors[0]}"
    return report
