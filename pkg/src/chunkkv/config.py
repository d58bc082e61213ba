from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the KV cache: heads, head dimension and chunk capacity.

    ``kv_bytes_per_element`` only affects byte accounting; all arithmetic
    runs in float32.
    """

    num_heads: int = 4
    head_dim: int = 64
    chunk_capacity: int = 64
    kv_bytes_per_element: int = 2

    def __post_init__(self) -> None:
        for name in ("num_heads", "head_dim", "chunk_capacity", "kv_bytes_per_element"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def chunk_bytes(self) -> int:
        # keys + values for every slot of one chunk
        return 2 * self.num_heads * self.chunk_capacity * self.head_dim * self.kv_bytes_per_element
