"""Deterministic stand-in for an LLM's QKV projection.

Every component is a pure function of ``(seed, token, position, head, kind,
index)`` built from splitmix64 integer hashing, so identical tokens at
identical positions always produce identical keys and values. That is the
property that makes sharing a prefix's KV cache valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):  # numpy scalars warn on wraparound
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _to_unit(z: np.ndarray) -> np.ndarray:
    # top 24 bits -> [-1, 1); exact in float32
    return ((z >> np.uint64(40)).astype(np.float32) / np.float32(2**23)) - np.float32(1.0)


def hash_combine(*parts) -> np.ndarray:
    h = np.zeros(np.broadcast(*[np.asarray(p) for p in parts]).shape, dtype=np.uint64)
    for p in parts:
        h = splitmix64(h ^ np.asarray(p).astype(np.uint64))
    return h


@dataclass(frozen=True)
class SyntheticModel:
    num_heads: int
    head_dim: int
    seed: int = 0
    layers: int = 1

    def qkv(self, tokens, positions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """q, k, v arrays shaped ``[n, h, d]`` for parallel token/position lists."""
        tok = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
        pos = np.atleast_1d(np.asarray(positions, dtype=np.int64))
        if tok.shape != pos.shape:
            raise ValueError("tokens and positions must have the same length")
        h, d = self.num_heads, self.head_dim
        base = hash_combine(np.uint64(self.seed), tok, pos)  # [n]
        # one lane per (head, kind, component)
        lanes = np.arange(h * 3 * d, dtype=np.uint64) * _GOLDEN
        vals = _to_unit(splitmix64(base[:, None] ^ lanes[None, :]))
        vals = vals.reshape(len(tok), h, 3, d)
        return vals[:, :, 0], vals[:, :, 1], vals[:, :, 2]

    def kv_range(self, tokens, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        _, k, v = self.qkv(tokens[start:stop], np.arange(start, stop))
        return k, v


def synth_qkv(model: SyntheticModel, token: int, position: int, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single ``(q, k, v)`` triple of length ``d`` for one head."""
    q, k, v = model.qkv([token], [position])
    return q[0, head], k[0, head], v[0, head]
