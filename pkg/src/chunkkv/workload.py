"""Synthetic request streams with Poisson arrivals and shared system prompts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WorkloadSpec:
    lam: float = 1.0
    request_count: int = 32
    n_p: int = 1024
    n_s: int = 0
    n_c: int = 64
    prompt_pool: int = 1
    seed: int = 0
    vocab_size: int = 32000

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lambda must be positive (use math.inf for a burst)")
        if min(self.request_count, self.n_p, self.n_s, self.n_c) < 0:
            raise ValueError("counts must be non-negative")
        if self.n_s > self.n_p:
            raise ValueError(f"n_s={self.n_s} exceeds n_p={self.n_p}")
        if self.n_p < 1 or self.n_c < 1:
            raise ValueError("every request needs at least one prompt and one completion token")
        if self.prompt_pool < 1:
            raise ValueError("prompt_pool must be >= 1")


@dataclass(frozen=True)
class Request:
    request_id: int
    arrival_time: float
    prompt: tuple[int, ...]
    n_c: int
    pool: int


def gen_workload(spec: WorkloadSpec) -> list[Request]:
    """Requests sorted by arrival; inter-arrival gaps are exponential(lam).

    Each request gets its pool's shared prefix of ``n_s`` tokens followed by
    ``n_p - n_s`` fresh random tokens. An infinite ``lam`` puts every arrival
    at time zero.
    """
    rng = np.random.default_rng(spec.seed)
    if np.isinf(spec.lam):
        arrivals = np.zeros(spec.request_count)
    else:
        arrivals = np.cumsum(rng.exponential(1.0 / spec.lam, size=spec.request_count))
    prefixes = rng.integers(0, spec.vocab_size, size=(spec.prompt_pool, spec.n_s))
    pools = np.arange(spec.request_count) % spec.prompt_pool
    suffixes = rng.integers(0, spec.vocab_size, size=(spec.request_count, spec.n_p - spec.n_s))
    out = []
    for r in range(spec.request_count):
        prompt = tuple(int(t) for t in np.concatenate([prefixes[pools[r]], suffixes[r]]))
        out.append(Request(r, float(arrivals[r]), prompt, spec.n_c, int(pools[r])))
    return out


def trace_lines(requests: list[Request]) -> list[str]:
    """Canonical text form of a trace, used to compare traces byte for byte."""
    return [
        f"{r.request_id} {r.arrival_time!r} {r.pool} {r.n_c} " + ",".join(map(str, r.prompt)) for r in requests
    ]
