"""Speaking/Silence switching at chunk granularity."""

from __future__ import annotations

import threading

from chunkcast.errors import ConfigError, LateSwitchError
from chunkcast.model import Mode

_MODE_WORDS = {"speak": Mode.SPEAKING, "speaking": Mode.SPEAKING, "silence": Mode.SILENCE, "silent": Mode.SILENCE}


def parse_mode_script(script: str) -> list[tuple[int, Mode]]:
    """Parse ``"0:speak,40:silence"`` into sorted (chunk, mode) pairs."""
    out = []
    for part in filter(None, (p.strip() for p in script.split(","))):
        try:
            idx, word = part.split(":")
            out.append((int(idx), _MODE_WORDS[word.strip().lower()]))
        except (ValueError, KeyError):
            raise ConfigError(f"bad mode-script entry {part!r}; expected '<chunk>:speak|silence'") from None
        if out[-1][0] < 0:
            raise ConfigError(f"negative chunk index in {part!r}")
    return sorted(out)


class ModeController:
    """Chunk-indexed mode schedule shared by the score stage and external callers.

    A switch takes effect at the first chunk that has not started scoring;
    switching a chunk that was already emitted raises :class:`LateSwitchError`.
    """

    def __init__(self, initial: Mode = Mode.SPEAKING):
        self._lock = threading.Lock()
        self._switches: list[tuple[int, Mode]] = [(0, Mode(initial))]
        self._next_unscored = 0
        self._last_emitted = -1

    def switch(self, chunk_idx: int, mode: Mode) -> int:
        """Request ``mode`` from ``chunk_idx`` on; returns the effective chunk."""
        with self._lock:
            if chunk_idx <= self._last_emitted:
                raise LateSwitchError(f"chunk {chunk_idx} already emitted", self._next_unscored)
            effective = max(chunk_idx, self._next_unscored)
            self._switches = [s for s in self._switches if s[0] < effective]
            self._switches.append((effective, Mode(mode)))
            return effective

    def mode_for(self, chunk_idx: int) -> Mode:
        with self._lock:
            mode = self._switches[0][1]
            for start, m in self._switches:
                if start <= chunk_idx:
                    mode = m
            return mode

    def begin_chunk(self, chunk_idx: int) -> Mode:
        """Called by the score stage; freezes the mode of ``chunk_idx``."""
        with self._lock:
            self._next_unscored = max(self._next_unscored, chunk_idx + 1)
        return self.mode_for(chunk_idx)

    def mark_emitted(self, chunk_idx: int) -> None:
        with self._lock:
            self._last_emitted = max(self._last_emitted, chunk_idx)

    @property
    def next_unscored(self) -> int:
        return self._next_unscored
