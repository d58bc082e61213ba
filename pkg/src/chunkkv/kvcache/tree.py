"""Prefix tree of KV chunks.

Every root-to-leaf path spells one live sequence. Sequences that agree on
their first ``k * c`` tokens share the first ``k`` chunks; sharing happens at
whole-chunk granularity only, so a divergence inside a chunk costs at most
``c - 1`` duplicated tokens.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Union

import numpy as np

from chunkkv.config import ModelConfig
from chunkkv.kvcache.allocator import Chunk, ChunkAllocator

# (start, stop) -> (keys [n, h, d], values [n, h, d]) for absolute positions start..stop-1
KVSupplier = Callable[[int, int], "tuple[np.ndarray, np.ndarray]"]


class UnknownSequenceError(KeyError):
    pass


class _Root:
    """Virtual parent of the forest's root chunks."""

    __slots__ = ("children", "full_children")

    def __init__(self) -> None:
        self.children: list[Chunk] = []
        self.full_children: dict[tuple[int, ...], Chunk] = {}


_Node = Union[Chunk, _Root]


@dataclass
class _Sequence:
    seq_id: int
    path: list[Chunk]
    length: int


@dataclass
class AttnContext:
    """Kernel schedule derived from one tree epoch.

    ``shared_entries`` holds ``(chunk, i, j)`` with the inclusive batch-index
    range of covered sequences, parents before descendants. ``private_entries``
    lists, per batch index, the remaining chunks on that sequence's path.
    """

    epoch: int
    seq_order: list[int]
    shared_entries: list[tuple[Chunk, int, int]]
    private_entries: list[list[Chunk]]
    batch_index: dict[int, int] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return len(self.seq_order)


@dataclass(frozen=True)
class MemoryStats:
    chunks_used: int = 0
    chunks_free: int = 0
    kv_bytes: int = 0
    waste_fraction: float = 0.0
    sharing_ratio: float = 0.0
    total_tokens: int = 0
    stored_tokens: int = 0
    sequences: int = 0


def _order_key(chunk: Chunk) -> tuple[int, int]:
    return (chunk.tokens[0], chunk.order)


class PrefixTree:
    """Forest of chunks with per-sequence paths and reference counts.

    With ``share_prefixes=False`` every sequence becomes a fresh root, which
    is the monolithic (non-sharing) baseline on identical storage.
    """

    def __init__(
        self,
        config: ModelConfig,
        allocator: ChunkAllocator | None = None,
        *,
        share_prefixes: bool = True,
        share_threshold: int = 2,
    ) -> None:
        if share_threshold < 2:
            raise ValueError("share_threshold must be >= 2")
        self.config = config
        self.allocator = allocator if allocator is not None else ChunkAllocator(config)
        if self.allocator.config != config:
            raise ValueError("allocator config does not match tree config")
        self.share_prefixes = share_prefixes
        self.share_threshold = share_threshold
        self._root = _Root()
        self._seqs: dict[int, _Sequence] = {}
        self._seq_ids = itertools.count()
        self._chunk_order = itertools.count()
        self.epoch = 0
        self._ctx: AttnContext | None = None

    # -- queries ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._seqs)

    def __contains__(self, seq_id: int) -> bool:
        return seq_id in self._seqs

    @property
    def roots(self) -> list[Chunk]:
        return self._root.children

    @property
    def sequence_ids(self) -> list[int]:
        return list(self._seqs)

    def _seq(self, seq_id: int) -> _Sequence:
        try:
            return self._seqs[seq_id]
        except KeyError:
            raise UnknownSequenceError(seq_id) from None

    def path(self, seq_id: int) -> list[Chunk]:
        return list(self._seq(seq_id).path)

    def seq_len(self, seq_id: int) -> int:
        return self._seq(seq_id).length

    def sequence_tokens(self, seq_id: int) -> list[int]:
        out: list[int] = []
        for chunk in self._seq(seq_id).path:
            out.extend(chunk.tokens)
        return out

    def gather_kv(self, seq_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous copies ``[h, n, d]`` of one sequence's keys and values."""
        path = self._seq(seq_id).path
        keys = np.concatenate([ch.keys[:, : len(ch)] for ch in path], axis=1)
        values = np.concatenate([ch.values[:, : len(ch)] for ch in path], axis=1)
        return keys, values

    def iter_chunks(self) -> Iterator[tuple[Chunk, _Node]]:
        """Pre-order walk yielding ``(chunk, parent)``."""
        stack = [(ch, self._root) for ch in reversed(self._root.children)]
        while stack:
            chunk, parent = stack.pop()
            yield chunk, parent
            stack.extend((ch, chunk) for ch in reversed(chunk.children))

    # -- mutation helpers ------------------------------------------------

    def _touch(self) -> None:
        self.epoch += 1
        self._ctx = None

    def _attach(self, parent: _Node, chunk: Chunk) -> None:
        chunk.parent = parent
        chunk.order = next(self._chunk_order)
        bisect.insort(parent.children, chunk, key=_order_key)
        if chunk.is_full:
            self._register_full(chunk)

    def _register_full(self, chunk: Chunk) -> None:
        block = tuple(chunk.tokens)
        parent = chunk.parent
        assert parent is not None
        # first complete copy wins; later duplicates stay unindexed
        parent.full_children.setdefault(block, chunk)

    def _detach(self, chunk: Chunk) -> None:
        parent = chunk.parent
        assert parent is not None
        parent.children.remove(chunk)
        if chunk.is_full:
            block = tuple(chunk.tokens)
            if parent.full_children.get(block) is chunk:
                del parent.full_children[block]
        chunk.parent = None

    def _new_chunk(self, parent: _Node, start_pos: int, tokens: list[int], keys, values) -> Chunk:
        chunk = self.allocator.acquire()
        chunk.start_pos = start_pos
        chunk.ref_count = 1
        chunk.write(tokens, keys, values)
        self._attach(parent, chunk)
        return chunk

    # -- lifecycle -------------------------------------------------------

    def insert_sequence(self, tokens: list[int], kv_supplier: KVSupplier) -> tuple[int, int]:
        """Add a sequence, reusing every complete matching chunk.

        Returns ``(seq_id, matched_token_count)``; ``kv_supplier`` is only
        called for positions at or after the matched prefix.
        """
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise ValueError("cannot insert an empty sequence")
        c = self.config.chunk_capacity
        n = len(tokens)
        node: _Node = self._root
        path: list[Chunk] = []
        pos = 0
        if self.share_prefixes:
            while pos + c <= n:
                child = node.full_children.get(tuple(tokens[pos : pos + c]))
                if child is None:
                    break
                path.append(child)
                node = child
                pos += c
        matched = pos
        new_chunks: list[Chunk] = []
        try:
            while pos < n:
                stop = min(pos + c, n)
                keys, values = kv_supplier(pos, stop)
                chunk = self._new_chunk(node, pos, tokens[pos:stop], keys, values)
                new_chunks.append(chunk)
                path.append(chunk)
                node = chunk
                pos = stop
        except BaseException:
            for chunk in reversed(new_chunks):
                self._detach(chunk)
                chunk.ref_count = 0
                self.allocator.release(chunk)
            raise
        for chunk in path[: len(path) - len(new_chunks)]:
            chunk.ref_count += 1
        seq_id = next(self._seq_ids)
        path[-1].terminals.append(seq_id)
        self._seqs[seq_id] = _Sequence(seq_id, path, n)
        self._touch()
        return seq_id, matched

    def append_token(self, seq_id: int, token: int, key: np.ndarray, value: np.ndarray) -> None:
        """Append one decoded token with ``key``/``value`` shaped ``[h, d]``."""
        seq = self._seq(seq_id)
        leaf = seq.path[-1]
        keys = np.asarray(key, dtype=np.float32)[None]
        values = np.asarray(value, dtype=np.float32)[None]
        if leaf.ref_count == 1 and not leaf.is_full:
            leaf.write([int(token)], keys, values)
            if leaf.is_full:
                self._register_full(leaf)
            seq.length += 1
            return
        # full leaf, or a shared one: shared chunks are never mutated
        assert leaf.is_full
        chunk = self._new_chunk(leaf, leaf.start_pos + self.config.chunk_capacity, [int(token)], keys, values)
        leaf.terminals.remove(seq_id)
        chunk.terminals.append(seq_id)
        seq.path.append(chunk)
        seq.length += 1
        self._touch()

    def remove_sequence(self, seq_id: int) -> int:
        """Drop a sequence; returns how many chunks went back to the pool."""
        seq = self._seq(seq_id)
        seq.path[-1].terminals.remove(seq_id)
        released = 0
        for chunk in reversed(seq.path):
            chunk.ref_count -= 1
            if chunk.ref_count == 0:
                self._detach(chunk)
                self.allocator.release(chunk)
                released += 1
        del self._seqs[seq_id]
        self._touch()
        return released

    # -- kernel context --------------------------------------------------

    def build_context(self) -> AttnContext:
        """DFS batch order plus the chunk-first / sequence-first schedule.

        Cached until the next structural change (new chunk, join, leave).
        """
        if self._ctx is not None and self._ctx.epoch == self.epoch:
            return self._ctx
        order: list[int] = []
        shared: list[list] = []
        # iterative DFS with explicit exit markers; recursion depth would track path length
        stack: list[tuple[Chunk, bool, int]] = [(ch, False, -1) for ch in reversed(self._root.children)]
        while stack:
            chunk, leaving, slot = stack.pop()
            if leaving:
                if slot >= 0:
                    shared[slot][2] = len(order) - 1
                continue
            slot = -1
            if chunk.ref_count >= self.share_threshold:
                slot = len(shared)
                shared.append([chunk, len(order), -1])
            order.extend(chunk.terminals)
            stack.append((chunk, True, slot))
            stack.extend((ch, False, -1) for ch in reversed(chunk.children))
        index = {sid: i for i, sid in enumerate(order)}
        private = [
            [ch for ch in self._seqs[sid].path if ch.ref_count < self.share_threshold] for sid in order
        ]
        self._ctx = AttnContext(
            epoch=self.epoch,
            seq_order=order,
            shared_entries=[(ch, i, j) for ch, i, j in shared],
            private_entries=private,
            batch_index=index,
        )
        return self._ctx

    # -- accounting ------------------------------------------------------

    def memory_stats(self) -> MemoryStats:
        alloc = self.allocator
        c = self.config.chunk_capacity
        used = alloc.used_count
        stored = sum(len(ch) for ch, _ in self.iter_chunks())
        total = sum(s.length for s in self._seqs.values())
        ratios = []
        for s in self._seqs.values():
            shared_tokens = sum(len(ch) for ch in s.path if ch.ref_count >= 2)
            ratios.append(shared_tokens / s.length)
        return MemoryStats(
            chunks_used=used,
            chunks_free=alloc.free_count,
            kv_bytes=used * self.config.chunk_bytes,
            waste_fraction=(used * c - stored) / (used * c) if used else 0.0,
            sharing_ratio=float(np.mean(ratios)) if ratios else 0.0,
            total_tokens=total,
            stored_tokens=stored,
            sequences=len(self._seqs),
        )

    # -- debugging -------------------------------------------------------

    def check_invariants(self) -> None:
        """Raise AssertionError if any structural invariant is broken."""
        ctx = self.build_context()
        assert sorted(ctx.seq_order) == sorted(self._seqs), "batch order must cover every live sequence"
        covered: dict[int, set[int]] = {}
        for sid, seq in self._seqs.items():
            assert sum(len(ch) for ch in seq.path) == seq.length
            for k, ch in enumerate(seq.path):
                assert ch.in_use
                assert ch.start_pos == k * self.config.chunk_capacity
                assert k == len(seq.path) - 1 or ch.is_full, "interior chunks must be full"
                covered.setdefault(ch.slot, set()).add(ctx.batch_index[sid])
        live = 0
        for ch, parent in self.iter_chunks():
            live += 1
            assert ch.parent is parent
            idx = covered.get(ch.slot, set())
            assert ch.ref_count == len(idx) >= 1, f"ref_count mismatch on {ch!r}"
            assert max(idx) - min(idx) + 1 == len(idx), f"non-contiguous batch range on {ch!r}"
        assert live == self.allocator.used_count
        assert self.allocator.created == self.allocator.used_count + self.allocator.free_count
        for ch, i, j in ctx.shared_entries:
            assert ch.ref_count == j - i + 1
        if self.share_threshold == 2:
            slots = [ch.slot for ch, _, _ in ctx.shared_entries]
            slots += [ch.slot for plist in ctx.private_entries for ch in plist]
            assert len(slots) == len(set(slots)) == live, "each chunk scheduled exactly once"


def insert_sequence(tree: PrefixTree, tokens: list[int], kv_supplier: KVSupplier) -> tuple[int, int]:
    return tree.insert_sequence(tokens, kv_supplier)


def append_token(tree: PrefixTree, seq_id: int, token: int, key: np.ndarray, value: np.ndarray) -> None:
    tree.append_token(seq_id, token, key, value)


def remove_sequence(tree: PrefixTree, seq_id: int) -> int:
    return tree.remove_sequence(seq_id)


def build_context(tree: PrefixTree) -> AttnContext:
    return tree.build_context()


def memory_stats(tree: PrefixTree) -> MemoryStats:
    return tree.memory_stats()
