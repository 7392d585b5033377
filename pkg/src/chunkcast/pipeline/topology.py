"""Server topologies, their cost model, and an event-driven latency predictor."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from chunkcast.errors import ConfigError


class Case(str, enum.Enum):
    SELF_CONTAINED_1 = "SelfContained1"
    SELF_CONTAINED_2SP = "SelfContained2SP"
    DISAGG_1PLUS1 = "Disagg1Plus1"
    DISAGG_2PLUS1 = "Disagg2Plus1"

    @classmethod
    def parse(cls, value) -> "Case":
        if isinstance(value, Case):
            return value
        for c in cls:
            if value in (c.value, c.name):
                return c
        raise ConfigError(f"unknown topology {value!r}; choose from {[c.value for c in cls]}")


CASE_NUMBER = {
    Case.SELF_CONTAINED_1: 1,
    Case.SELF_CONTAINED_2SP: 2,
    Case.DISAGG_1PLUS1: 3,
    Case.DISAGG_2PLUS1: 4,
}


@dataclass(frozen=True)
class CostModel:
    """Modeled device costs in milliseconds."""

    score_ms_per_step: float = 60.0
    steps: int = 2
    decode_ms: float = 25.0
    transfer_ms: float = 5.0
    collective_ms: float = 8.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        for name in ("score_ms_per_step", "decode_ms", "transfer_ms", "collective_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Topology:
    case: Case
    cost: CostModel = CostModel()
    queue_depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "case", Case.parse(self.case))
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")

    @property
    def score_workers(self) -> int:
        return 2 if self.case in (Case.SELF_CONTAINED_2SP, Case.DISAGG_2PLUS1) else 1

    @property
    def disaggregated(self) -> bool:
        return self.case in (Case.DISAGG_1PLUS1, Case.DISAGG_2PLUS1)

    @property
    def decoder_stages(self) -> int:
        return 1 if self.disaggregated else 0

    @property
    def step_ms(self) -> float:
        """Modeled wall time of one denoise step across the score workers."""
        w = self.score_workers
        return self.cost.score_ms_per_step / w + (self.cost.collective_ms if w > 1 else 0.0)

    @property
    def score_ms(self) -> float:
        return self.cost.steps * self.step_ms

    @property
    def tail_ms(self) -> float:
        """Decode plus output transfer for one chunk."""
        return self.cost.decode_ms + self.cost.transfer_ms


def simulate_topology(topology: Topology, n_chunks: int):
    """Predict per-chunk timestamps without executing a model.

    Self-contained servers run score, decode and transfer back to back.
    Disaggregated servers hand each scored chunk to a decoder through a
    bounded queue of ``queue_depth`` items; the score stage only waits when
    that queue is full.
    """
    from chunkcast.pipeline.report import TTBCReport

    if n_chunks < 1:
        raise ConfigError("n_chunks must be >= 1")
    S, tail = topology.score_ms, topology.tail_ms
    ready, done, emitted = [], [], []
    if not topology.disaggregated:
        t = 0.0
        for _ in range(n_chunks):
            t += S
            ready.append(t)
            t += topology.cost.decode_ms
            done.append(t)
            t += topology.cost.transfer_ms
            emitted.append(t)
    else:
        depth = topology.queue_depth
        starts: list[float] = []
        score_free = 0.0
        dec_free = 0.0
        stalls = 0.0
        for i in range(n_chunks):
            r = score_free + S
            ready.append(r)
            # the decoder pulls chunk i at start_i; chunk i can be queued once chunk i-depth was pulled
            start = max(r, dec_free)
            starts.append(start)
            put = r if i < depth else max(r, starts[i - depth])
            stalls += put - r
            score_free = put
            dec_free = start + tail
            done.append(start + topology.cost.transfer_ms + topology.cost.decode_ms)
            emitted.append(dec_free)
    ms = 1e-3
    return TTBCReport(
        case=topology.case.value,
        chunk_ready=[x * ms for x in ready],
        decode_done=[x * ms for x in done],
        emitted=[x * ms for x in emitted],
        predicted=True,
    )


def steady_state_ttbc_ms(topology: Topology) -> float:
    """Closed form: serial sum when self-contained, slowest stage when disaggregated."""
    if topology.disaggregated:
        return max(topology.score_ms, topology.tail_ms)
    return topology.score_ms + topology.tail_ms
