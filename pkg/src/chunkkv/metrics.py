from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class RequestTrace:
    request_id: int
    arrival_time: float
    admit_time: float
    first_token_time: float
    finish_time: float
    n_p: int
    n_c: int
    matched_tokens: int
    projections_computed: int
    projections_skipped: int

    @property
    def latency(self) -> float:
        """End-to-end seconds, queuing included."""
        return self.finish_time - self.arrival_time

    @property
    def normalized_latency_ms(self) -> float:
        return 1000.0 * self.latency / self.n_c

    def record(self) -> dict:
        row = asdict(self)
        row["latency"] = self.latency
        row["normalized_latency_ms"] = self.normalized_latency_ms
        return row


@dataclass
class RunMetrics:
    mode: str
    normalized_latency: float  # ms/token, mean over requests
    token_rate: float  # completion tokens per second of decode time
    peak_kv_bytes: int
    peak_kv_chunks: int
    peak_batch_size: int
    decode_time: float
    total_time: float
    completion_tokens: int
    decode_steps: int
    projections_computed: int
    projections_skipped: int
    traces: list[RequestTrace] = field(default_factory=list)

    def summary(self) -> dict:
        row = asdict(self)
        del row["traces"]
        return row


def normalized_latency(traces: list[RequestTrace]) -> float:
    if not traces:
        return 0.0
    return sum(t.normalized_latency_ms for t in traces) / len(traces)
