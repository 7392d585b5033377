"""Streaming server topologies, latency measurement and the real-time verdict."""

from chunkcast.pipeline.modes import ModeController, parse_mode_script
from chunkcast.pipeline.report import TTBCReport, bench_rows, realtime_check, write_bench
from chunkcast.pipeline.session import StreamSession, run_stream
from chunkcast.pipeline.topology import (CASE_NUMBER, Case, CostModel, Topology, simulate_topology,
                                         steady_state_ttbc_ms)


def switch_mode(session: StreamSession, chunk_idx: int, mode) -> int:
    """Request a mode change for a live session; returns the effective chunk."""
    return session.controller.switch(chunk_idx, mode)


__all__ = [
    "CASE_NUMBER", "Case", "CostModel", "ModeController", "StreamSession", "TTBCReport", "Topology",
    "bench_rows", "parse_mode_script", "realtime_check", "run_stream", "simulate_topology",
    "steady_state_ttbc_ms", "switch_mode", "write_bench",
]
