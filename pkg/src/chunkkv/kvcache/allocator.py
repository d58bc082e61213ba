"""Pool allocator for fixed-size KV chunks.

Chunk payloads live in two arena arrays shaped ``[slots, h, c, d]``; a
:class:`Chunk` is a handle onto one slot plus its tree metadata. Released
chunks go back on a free list and are handed out again before any new slot
is created. The arena only ever grows.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from chunkkv.config import ModelConfig

if TYPE_CHECKING:
    from chunkkv.kvcache.tree import _Node


class CapacityError(RuntimeError):
    """Raised when a hard chunk cap is configured and exhausted."""


class AllocatorError(RuntimeError):
    """Contract violation on acquire/release (double release, live refs)."""


class Chunk:
    """Up to ``c`` tokens of one path segment and their per-head keys/values."""

    __slots__ = (
        "_alloc",
        "slot",
        "tokens",
        "start_pos",
        "ref_count",
        "parent",
        "children",
        "full_children",
        "terminals",
        "order",
        "in_use",
    )

    def __init__(self, alloc: ChunkAllocator, slot: int) -> None:
        self._alloc = alloc
        self.slot = slot
        self.tokens: list[int] = []
        self.start_pos = 0
        self.ref_count = 0
        self.parent: _Node | None = None
        self.children: list[Chunk] = []
        # complete children indexed by their token block, for prefix matching
        self.full_children: dict[tuple[int, ...], Chunk] = {}
        # sequences whose path ends at this chunk, in insertion order
        self.terminals: list[int] = []
        self.order = 0
        self.in_use = False

    @property
    def id(self) -> int:
        return self.slot

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def capacity(self) -> int:
        return self._alloc.config.chunk_capacity

    @property
    def is_full(self) -> bool:
        return len(self.tokens) == self._alloc.config.chunk_capacity

    @property
    def keys(self) -> np.ndarray:
        """View ``[h, c, d]`` of this chunk's key slot (rows past ``len`` undefined)."""
        return self._alloc.keys[self.slot]

    @property
    def values(self) -> np.ndarray:
        return self._alloc.values[self.slot]

    def write(self, tokens: list[int], keys: np.ndarray, values: np.ndarray) -> None:
        """Append tokens with keys/values shaped ``[n, h, d]``."""
        off = len(self.tokens)
        n = len(tokens)
        if off + n > self.capacity:
            raise ValueError(f"chunk {self.slot} overflow: {off} + {n} > {self.capacity}")
        self._alloc.keys[self.slot, :, off : off + n] = np.swapaxes(keys, 0, 1)
        self._alloc.values[self.slot, :, off : off + n] = np.swapaxes(values, 0, 1)
        self.tokens.extend(tokens)

    def _reset(self) -> None:
        self.tokens = []
        self.start_pos = 0
        self.ref_count = 0
        self.parent = None
        self.children = []
        self.full_children = {}
        self.terminals = []
        self.order = 0

    def __repr__(self) -> str:
        return f"Chunk(id={self.slot}, start={self.start_pos}, len={len(self.tokens)}, ref={self.ref_count})"


class ChunkAllocator:
    """Free-list pool of :class:`Chunk` handles backed by growable arenas."""

    def __init__(
        self,
        config: ModelConfig,
        max_chunks: int | None = None,
        initial_slots: int = 64,
    ) -> None:
        self.config = config
        self.max_chunks = max_chunks
        slots = max(1, initial_slots if max_chunks is None else min(initial_slots, max_chunks))
        shape = (slots, config.num_heads, config.chunk_capacity, config.head_dim)
        self.keys = np.zeros(shape, dtype=np.float32)
        self.values = np.zeros(shape, dtype=np.float32)
        self._chunks: list[Chunk] = []
        self.free_list: list[Chunk] = []
        self.used_count = 0
        self.high_water_mark = 0

    @property
    def free_count(self) -> int:
        return len(self.free_list)

    @property
    def created(self) -> int:
        return len(self._chunks)

    def _grow(self) -> None:
        old = self.keys.shape[0]
        new = old * 2
        if self.max_chunks is not None:
            new = min(new, self.max_chunks)
        shape = (new,) + self.keys.shape[1:]
        keys = np.zeros(shape, dtype=np.float32)
        values = np.zeros(shape, dtype=np.float32)
        keys[:old] = self.keys
        values[:old] = self.values
        self.keys, self.values = keys, values

    def acquire(self) -> Chunk:
        if self.free_list:
            chunk = self.free_list.pop()
        else:
            if self.max_chunks is not None and self.created >= self.max_chunks:
                raise CapacityError(f"chunk pool exhausted ({self.max_chunks} chunks)")
            if self.created == self.keys.shape[0]:
                self._grow()
            chunk = Chunk(self, self.created)
            self._chunks.append(chunk)
        chunk.in_use = True
        self.used_count += 1
        self.high_water_mark = max(self.high_water_mark, self.used_count)
        return chunk

    def release(self, chunk: Chunk) -> None:
        if chunk._alloc is not self:
            raise AllocatorError("chunk belongs to a different allocator")
        if not chunk.in_use:
            raise AllocatorError(f"double release of chunk {chunk.slot}")
        if chunk.ref_count != 0:
            raise AllocatorError(f"chunk {chunk.slot} still referenced (ref_count={chunk.ref_count})")
        if chunk.parent is not None:
            raise AllocatorError(f"chunk {chunk.slot} still attached to the tree")
        chunk._reset()
        chunk.in_use = False
        self.used_count -= 1
        self.free_list.append(chunk)


def acquire_chunk(alloc: ChunkAllocator) -> Chunk:
    return alloc.acquire()


def release_chunk(alloc: ChunkAllocator, chunk: Chunk) -> None:
    alloc.release(chunk)
