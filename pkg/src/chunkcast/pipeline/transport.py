"""Inter-stage transports: a bounded in-process queue and a TCP link.

Wire message: ``<u32 magic><u32 chunk_idx><u32 step>`` followed by one
tensor in the numerics binary format (self-delimiting). A message whose
chunk index is ``0xFFFFFFFF`` closes the stream.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from typing import BinaryIO

import numpy as np

from chunkcast.errors import ContractError
from chunkcast.numerics.serialize import read_tensor, write_tensor

WIRE_MAGIC = 0x43435754  # "CCWT"
END_OF_STREAM = 0xFFFFFFFF
_HEADER = struct.Struct("<III")


def write_message(stream: BinaryIO, chunk_idx: int, step: int, payload: np.ndarray) -> None:
    stream.write(_HEADER.pack(WIRE_MAGIC, chunk_idx, step))
    write_tensor(stream, payload)


def read_message(stream: BinaryIO) -> tuple[int, int, np.ndarray]:
    head = stream.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ContractError("truncated message header")
    magic, chunk_idx, step = _HEADER.unpack(head)
    if magic != WIRE_MAGIC:
        raise ContractError(f"bad wire magic {magic:#x}")
    return chunk_idx, step, read_tensor(stream)


class QueueTransport:
    """Bounded FIFO between two threads; ``put`` blocks when full and reports the wait."""

    def __init__(self, depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=depth)

    def put(self, chunk_idx: int, step: int, payload: np.ndarray) -> float:
        t0 = time.perf_counter()
        self._q.put((chunk_idx, step, payload))
        return time.perf_counter() - t0

    def get(self, timeout: float | None = None):
        """Next (chunk_idx, step, payload) or None at end of stream."""
        return self._q.get(timeout=timeout)

    def close(self) -> None:
        self._q.put(None)


class TcpTransport:
    """Loopback TCP link with real serialization.

    Backpressure comes from a credit counter of ``depth`` in-flight messages,
    mirroring the queue transport.
    """

    def __init__(self, depth: int = 2, host: str = "127.0.0.1"):
        self._server = socket.create_server((host, 0))
        self._credits = threading.Semaphore(depth)
        self._send = socket.create_connection(self._server.getsockname())
        self._recv, _ = self._server.accept()
        for s in (self._send, self._recv):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wfile = self._send.makefile("wb")
        self._rfile = self._recv.makefile("rb")

    def put(self, chunk_idx: int, step: int, payload: np.ndarray) -> float:
        t0 = time.perf_counter()
        self._credits.acquire()
        waited = time.perf_counter() - t0
        write_message(self._wfile, chunk_idx, step, payload)
        self._wfile.flush()
        return waited

    def get(self, timeout: float | None = None):
        self._recv.settimeout(timeout)
        chunk_idx, step, payload = read_message(self._rfile)
        self._credits.release()
        if chunk_idx == END_OF_STREAM:
            return None
        return chunk_idx, step, payload

    def close(self) -> None:
        write_message(self._wfile, END_OF_STREAM, 0, np.zeros(0))
        self._wfile.flush()

    def shutdown(self) -> None:
        for f in (self._wfile, self._rfile):
            try:
                f.close()
            except OSError:
                pass
        for s in (self._send, self._recv, self._server):
            s.close()


def make_transport(kind: str, depth: int):
    if kind == "queue":
        return QueueTransport(depth)
    if kind == "tcp":
        return TcpTransport(depth)
    raise ContractError(f"unknown transport {kind!r}")
