"""Time-between-chunks reports, the real-time verdict and benchmark tables."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from chunkcast.errors import ConfigError, ContractError

BENCH_COLUMNS = ("case", "mean_ms", "p95_ms", "realtime")


@dataclass
class TTBCReport:
    """Per-chunk timestamps in seconds since stream start."""

    case: str = ""
    chunk_ready: list = field(default_factory=list)
    decode_done: list = field(default_factory=list)
    emitted: list = field(default_factory=list)
    stalls_ms: float = 0.0
    realtime: bool | None = None
    cache_stats: dict = field(default_factory=dict)
    predicted: bool = False
    aborted: str | None = None

    @property
    def n_chunks(self) -> int:
        return len(self.emitted)

    @property
    def ttbc_ms(self) -> np.ndarray:
        """Intervals between consecutive emissions."""
        e = np.asarray(self.emitted, dtype=float)
        return np.diff(e) * 1000.0

    def summary(self) -> dict:
        d = self.ttbc_ms
        if d.size == 0:
            return {"mean_ms": float("nan"), "p95_ms": float("nan"), "max_ms": float("nan")}
        return {"mean_ms": float(d.mean()), "p95_ms": float(np.percentile(d, 95)), "max_ms": float(d.max())}

    def latency_slope(self) -> float:
        """OLS slope of ttbc against chunk index, in ms per chunk."""
        d = self.ttbc_ms
        if d.size < 2:
            raise ContractError("need at least three chunks for a slope")
        return float(np.polyfit(np.arange(d.size, dtype=float), d, 1)[0])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ttbc_ms"] = self.ttbc_ms.tolist()
        out["summary"] = self.summary()
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def write_csv(self, path) -> None:
        """Per-chunk rows: index, ttbc and stage timestamps (ms)."""
        ttbc = [float("nan")] + self.ttbc_ms.tolist()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chunk_idx", "ttbc_ms", "chunk_ready_ms", "decode_done_ms", "emitted_ms"])
            for i in range(self.n_chunks):
                w.writerow([i, ttbc[i], 1000 * self.chunk_ready[i], 1000 * self.decode_done[i],
                            1000 * self.emitted[i]])


def realtime_check(report: TTBCReport, fps: float, frames_per_chunk: int, quantile: str | float = 0.95) -> bool:
    """True iff the chosen quantile of ttbc is strictly below the chunk duration.

    ``quantile`` is a fraction in (0, 1] or ``"max"``.
    """
    if fps <= 0 or frames_per_chunk <= 0:
        raise ConfigError("fps and frames_per_chunk must be positive")
    d = report.ttbc_ms
    if d.size == 0:
        raise ContractError("empty report: no intervals between chunks")
    budget = 1000.0 * frames_per_chunk / fps
    if quantile == "max":
        stat = float(d.max())
    else:
        q = float(quantile)
        if not 0 < q <= 1:
            raise ConfigError("quantile must lie in (0, 1]")
        stat = float(np.percentile(d, 100 * q))
    return stat < budget


def bench_rows(reports: list[TTBCReport], fps: float, frames_per_chunk: int, skip: int = 1) -> list[dict]:
    """One summary row per report; the first ``skip`` intervals (warm-up) are dropped."""
    rows = []
    for r in reports:
        d = r.ttbc_ms[skip:]
        trimmed = TTBCReport(case=r.case, emitted=list(r.emitted[skip:]))
        rows.append({
            "case": r.case,
            "mean_ms": float(d.mean()),
            "p95_ms": float(np.percentile(d, 95)),
            "realtime": realtime_check(trimmed, fps, frames_per_chunk),
        })
    return rows


def write_bench(rows: list[dict], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=1))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
