"""Analytic FLOPs / memory-traffic estimate for one decode step of self-attention."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class RooflineEstimate:
    flops: int
    mops: int

    @property
    def arithmetic_intensity(self) -> float:
        return self.flops / self.mops


def estimate_roofline(b: int, h: int, n: int, d: int, bytes_per_element: int = 2) -> RooflineEstimate:
    """Cost of attending one new token per sequence over ``n`` cached tokens.

    FLOPs count q.K^T and E.V with multiply-add as two operations. Memory
    traffic covers the K and V reads, the query read and output write, and
    the logit vector written then read back by softmax.
    """
    for name, val in (("b", b), ("h", h), ("n", n), ("d", d), ("bytes_per_element", bytes_per_element)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    flops = 4 * b * h * n * d
    kv = 2 * b * h * n * d
    q_o = 2 * b * h * d
    softmax = 2 * b * h * n
    return RooflineEstimate(flops=flops, mops=(kv + q_o + softmax) * bytes_per_element)


# Self-attention rows of the Llama2-7B decoder-layer breakdown (n=2048, FP16).
PUBLISHED_ATTENTION = {
    1: {"flops": 33.57e6, "mops": 33.85e6, "intensity": 0.99},
    32: {"flops": 1074.27e6, "mops": 1083.18e6, "intensity": 0.99},
    64: {"flops": 2148.53e6, "mops": 2166.36e6, "intensity": 0.99},
}
