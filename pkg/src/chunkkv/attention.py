"""Two-phase partition attention over the prefix tree.

Decode attention for a batch of last-token queries runs in two passes:

* chunk-first: every chunk covered by two or more sequences is attended once
  by the stacked queries of the sequences it covers, producing a partial
  ``(o, m, n)`` triple per row;
* sequence-first: each sequence folds those partials into its accumulator
  with the online-softmax merge, then walks its private chunks.

Arrays use row-major ``[batch, head, dim]`` layout for queries and outputs.
All math is float32; :func:`naive_attn_oracle` defaults to float64 so it can
serve as ground truth.
"""

from __future__ import annotations

import functools
import os
import threading
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from chunkkv.kvcache.tree import AttnContext, PrefixTree

THREADS_ENV = "CHUNKKV_THREADS"


class EpochMismatchError(RuntimeError):
    """Partials were produced for a different tree epoch than the context."""


@dataclass
class PartialAttn:
    """Unnormalized output ``o [..., r, d]``, running max ``m`` and normalizer ``n`` (``[..., r]``)."""

    o: np.ndarray
    m: np.ndarray
    n: np.ndarray

    def output(self) -> np.ndarray:
        return self.o / self.n[..., None]


@dataclass
class ChunkPartials:
    epoch: int
    heads: slice
    by_chunk: dict[int, PartialAttn]

    def __len__(self) -> int:
        return len(self.by_chunk)


def default_scale(head_dim: int) -> float:
    return 1.0 / float(np.sqrt(head_dim))


def fresh_accumulator(shape: tuple[int, ...], head_dim: int, dtype=np.float32) -> PartialAttn:
    return PartialAttn(
        o=np.zeros(shape + (head_dim,), dtype=dtype),
        m=np.full(shape, -np.inf, dtype=dtype),
        n=np.zeros(shape, dtype=dtype),
    )


def partial_attn(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    scale: float | None = None,
    valid_len: np.ndarray | int | None = None,
) -> PartialAttn:
    """Attention of query rows against one chunk, left unnormalized.

    ``q`` is ``[..., r, d]``; ``k`` and ``v`` are ``[..., L, d]`` with matching
    (broadcastable) leading dims. ``valid_len`` masks key columns at or past
    the given length, which lets chunks of different fill levels be stacked.
    """
    if k.shape[-2] == 0:
        raise ValueError("partial_attn needs at least one key")
    if scale is None:
        scale = default_scale(q.shape[-1])
    w = np.matmul(q, np.swapaxes(k, -1, -2))
    w *= np.float32(scale) if w.dtype == np.float32 else scale
    if valid_len is not None:
        cols = np.arange(k.shape[-2])
        lens = np.asarray(valid_len)
        mask = cols >= lens[..., None, None]
        if mask.any():
            if np.any(lens < 1):
                raise ValueError("partial_attn needs at least one valid key per row")
            w = np.where(mask, -np.inf, w)
    m = w.max(axis=-1)
    e = np.exp(w - m[..., None])
    n = e.sum(axis=-1)
    o = np.matmul(e, v)
    return PartialAttn(o=o, m=m, n=n)


def attn_reduce(part: PartialAttn, acc: PartialAttn) -> PartialAttn:
    """Merge one partial into an accumulator (online softmax).

    A fresh accumulator has ``m = -inf`` so the first merge returns the
    partial unchanged.
    """
    m = np.maximum(part.m, acc.m)
    x = np.exp(part.m - m)
    y = np.exp(acc.m - m)
    return PartialAttn(
        o=x[..., None] * part.o + y[..., None] * acc.o,
        m=m,
        n=x * part.n + y * acc.n,
    )


# -- worker pool -------------------------------------------------------------


def resolve_workers(requested: int | None = None) -> int:
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


@functools.lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="chunkkv")


def _head_groups(num_heads: int, workers: int) -> list[slice]:
    groups = min(workers, num_heads)
    bounds = np.linspace(0, num_heads, groups + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run(tasks, workers: int, pool: Executor | None) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    executor = pool if pool is not None else _pool(workers)
    return [f.result() for f in [executor.submit(t) for t in tasks]]


# -- private-chunk schedule ----------------------------------------------------


@dataclass
class _PrivatePlan:
    """Per path-step ``k``: rows that own a k-th private chunk and its slot."""

    rows: list[np.ndarray]
    slots: list[np.ndarray]
    lens: list[np.ndarray]
    # (step, position) of each row's last private chunk, whose length may grow in place
    leaves: list[tuple[int, int, object]]


def _private_plan(ctx: AttnContext, capacity: int) -> _PrivatePlan:
    plan = getattr(ctx, "_plan", None)
    if plan is not None:
        return plan
    depth = max((len(p) for p in ctx.private_entries), default=0)
    rows: list[list[int]] = [[] for _ in range(depth)]
    slots: list[list[int]] = [[] for _ in range(depth)]
    leaves = []
    for r, plist in enumerate(ctx.private_entries):
        for k, ch in enumerate(plist):
            if k == len(plist) - 1:
                leaves.append((k, len(rows[k]), ch))
            rows[k].append(r)
            slots[k].append(ch.slot)
    plan = _PrivatePlan(
        rows=[np.asarray(x, dtype=np.intp) for x in rows],
        slots=[np.asarray(x, dtype=np.intp) for x in slots],
        lens=[np.full(len(x), capacity, dtype=np.intp) for x in rows],
        leaves=leaves,
    )
    ctx._plan = plan  # type: ignore[attr-defined]
    return plan


# -- phases ------------------------------------------------------------------


def _chunk_partial(q: np.ndarray, chunk, i: int, j: int, heads: slice, scale: float) -> PartialAttn:
    length = len(chunk)
    qs = np.swapaxes(q[i : j + 1, heads], 0, 1)  # [hg, r, d]
    p = partial_attn(qs, chunk.keys[heads, :length], chunk.values[heads, :length], scale)
    # back to row-major [r, hg, ...]
    return PartialAttn(o=np.swapaxes(p.o, 0, 1), m=p.m.T, n=p.n.T)


def attn_chunk_first(
    q: np.ndarray,
    ctx: AttnContext,
    scale: float | None = None,
    heads: slice = slice(None),
    debug: TextIO | None = None,
) -> ChunkPartials:
    """Partial attention of stacked queries against every shared chunk."""
    if scale is None:
        scale = default_scale(q.shape[-1])
    out: dict[int, PartialAttn] = {}
    for chunk, i, j in ctx.shared_entries:
        p = _chunk_partial(q, chunk, i, j, heads, scale)
        out[chunk.slot] = p
        if debug is not None:
            _debug_line(debug, chunk.slot, i, j, heads, p)
    return ChunkPartials(epoch=ctx.epoch, heads=heads, by_chunk=out)


def _debug_line(stream: TextIO, slot: int, i: int, j: int, heads: slice, p: PartialAttn) -> None:
    start = heads.start or 0
    for hh in range(p.m.shape[1]):
        m = " ".join(f"{x:.6g}" for x in p.m[:, hh])
        n = " ".join(f"{x:.6g}" for x in p.n[:, hh])
        stream.write(f"chunk={slot} rows={i}..{j} head={start + hh} m=[{m}] n=[{n}]\n")


def _private_phase(
    q: np.ndarray, ctx: AttnContext, acc: PartialAttn, heads: slice, scale: float, tree: PrefixTree
) -> None:
    """Walk every sequence's private chunks in path order, merging into ``acc``.

    ``acc`` covers exactly the ``heads`` slice. Step ``k`` handles the k-th
    private chunk of all sequences that have one; their chunks are gathered
    into one stacked array so the per-sequence work is a single batched call.
    """
    capacity = tree.config.chunk_capacity
    keys, values = tree.allocator.keys, tree.allocator.values
    plan = _private_plan(ctx, capacity)
    for k, pos, ch in plan.leaves:
        plan.lens[k][pos] = len(ch)
    for rows, slots, lens in zip(plan.rows, plan.slots, plan.lens):
        kk = keys[slots, heads]  # [nr, hg, c, d] gathered copy
        vv = values[slots, heads]
        qq = q[rows, heads][:, :, None, :]
        valid = None if bool((lens == capacity).all()) else lens[:, None]
        p = partial_attn(qq, kk, vv, scale, valid_len=valid)
        part = PartialAttn(o=p.o[:, :, 0], m=p.m[:, :, 0], n=p.n[:, :, 0])
        new = attn_reduce(part, PartialAttn(o=acc.o[rows], m=acc.m[rows], n=acc.n[rows]))
        acc.o[rows] = new.o
        acc.m[rows] = new.m
        acc.n[rows] = new.n


def _merge_rows(acc: PartialAttn, i: int, j: int, part: PartialAttn) -> None:
    new = attn_reduce(part, PartialAttn(o=acc.o[i : j + 1], m=acc.m[i : j + 1], n=acc.n[i : j + 1]))
    acc.o[i : j + 1] = new.o
    acc.m[i : j + 1] = new.m
    acc.n[i : j + 1] = new.n


def attn_seq_first(
    q: np.ndarray,
    ctx: AttnContext,
    partials: ChunkPartials,
    tree: PrefixTree,
    scale: float | None = None,
    heads: slice = slice(None),
) -> np.ndarray:
    """Fold shared partials per sequence, then attend its private chunks.

    Returns normalized outputs ``[b, hg, d]`` for the requested head slice.
    """
    if partials.epoch != ctx.epoch:
        raise EpochMismatchError(f"partials from epoch {partials.epoch}, context at {ctx.epoch}")
    if scale is None:
        scale = default_scale(q.shape[-1])
    hg = len(range(*heads.indices(q.shape[1])))
    acc = fresh_accumulator((ctx.batch_size, hg), q.shape[-1])
    for chunk, i, j in ctx.shared_entries:
        part = partials.by_chunk.get(chunk.slot)
        if part is None:
            raise EpochMismatchError(f"no partial for shared chunk {chunk.slot}")
        _merge_rows(acc, i, j, part)
    _private_phase(q, ctx, acc, heads, scale, tree)
    return acc.output()


def two_phase_attn(
    q: np.ndarray,
    tree: PrefixTree,
    *,
    scale: float | None = None,
    direct_reduce: bool = False,
    workers: int = 1,
    pool: Executor | None = None,
    debug: TextIO | None = None,
) -> np.ndarray:
    """Decode attention for one query per live sequence, in batch-index order.

    ``q`` is ``[b, h, d]`` float32 ordered like ``tree.build_context().seq_order``.
    With ``direct_reduce`` the shared partials are merged straight into the
    accumulators under a per-row lock instead of being materialized.
    """
    ctx = tree.build_context()
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.ndim != 3 or q.shape[0] != ctx.batch_size:
        raise ValueError(f"query batch {q.shape} does not match {ctx.batch_size} live sequences")
    h, d = tree.config.num_heads, tree.config.head_dim
    if q.shape[1:] != (h, d):
        raise ValueError(f"query heads/dim {q.shape[1:]} != ({h}, {d})")
    if scale is None:
        scale = default_scale(d)
    _private_plan(ctx, tree.config.chunk_capacity)
    if direct_reduce:
        return _direct_reduce_attn(q, ctx, tree, scale, workers, pool, debug)

    out = np.empty_like(q)

    def group(heads: slice) -> None:
        partials = attn_chunk_first(q, ctx, scale, heads, debug)
        out[:, heads] = attn_seq_first(q, ctx, partials, tree, scale, heads)

    _run([functools.partial(group, hs) for hs in _head_groups(h, workers)], workers, pool)
    return out


def _direct_reduce_attn(
    q: np.ndarray,
    ctx: AttnContext,
    tree: PrefixTree,
    scale: float,
    workers: int,
    pool: Executor | None,
    debug: TextIO | None,
) -> np.ndarray:
    b, h, d = q.shape
    acc = fresh_accumulator((b, h), d)
    locks = [threading.Lock() for _ in range(b)]
    everything = slice(None)

    def shared_task(entries: Sequence) -> None:
        for chunk, i, j in entries:
            part = _chunk_partial(q, chunk, i, j, everything, scale)
            if debug is not None:
                _debug_line(debug, chunk.slot, i, j, everything, part)
            held = locks[i : j + 1]
            # ascending acquisition order rules out deadlock between overlapping ranges
            for lk in held:
                lk.acquire()
            try:
                _merge_rows(acc, i, j, part)
            finally:
                for lk in reversed(held):
                    lk.release()

    entries = ctx.shared_entries
    n_tasks = max(1, min(workers, len(entries)))
    _run([functools.partial(shared_task, entries[t::n_tasks]) for t in range(n_tasks)], workers, pool)

    def private_task(heads: slice) -> None:
        view = PartialAttn(o=acc.o[:, heads], m=acc.m[:, heads], n=acc.n[:, heads])
        _private_phase(q, ctx, view, heads, scale, tree)

    _run([functools.partial(private_task, hs) for hs in _head_groups(h, workers)], workers, pool)
    return acc.output()


# -- references --------------------------------------------------------------


def naive_attn_oracle(
    q: np.ndarray,
    keys: Sequence[np.ndarray],
    values: Sequence[np.ndarray],
    scale: float | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """softmax(q k^T * scale) v per sequence and head, computed directly.

    ``q`` is ``[b, h, d]``; ``keys[s]`` and ``values[s]`` are ``[h, n_s, d]``.
    """
    q = np.asarray(q, dtype=dtype)
    b, h, d = q.shape
    if scale is None:
        scale = default_scale(d)
    out = np.empty((b, h, d), dtype=dtype)
    for s in range(b):
        k = np.asarray(keys[s], dtype=dtype)
        v = np.asarray(values[s], dtype=dtype)
        w = np.einsum("hd,hnd->hn", q[s], k) * dtype(scale)
        w -= w.max(axis=-1, keepdims=True)
        e = np.exp(w)
        out[s] = np.einsum("hn,hnd->hd", e, v) / e.sum(axis=-1)[:, None]
    return out


def naive_attn_tree(q: np.ndarray, tree: PrefixTree, scale: float | None = None, dtype=np.float64) -> np.ndarray:
    """Oracle over each live sequence's gathered KV, in the tree's batch order."""
    order = tree.build_context().seq_order
    kv = [tree.gather_kv(sid) for sid in order]
    return naive_attn_oracle(q, [k for k, _ in kv], [v for _, v in kv], scale, dtype)


def prefill_attn(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    q_start: int | None = None,
    scale: float | None = None,
    block: int = 256,
) -> np.ndarray:
    """Causal attention for prompt positions ``q_start .. n-1``.

    ``q`` is ``[n_q, h, d]`` for the trailing positions; ``k``/``v`` are
    ``[n, h, d]`` for the whole prompt. Position ``p`` attends keys ``0..p``.
    Query rows are processed in blocks to bound the logit buffer.
    """
    n = k.shape[0]
    n_q, h, d = q.shape
    if q_start is None:
        q_start = n - n_q
    if q_start < 0 or q_start + n_q > n:
        raise ValueError("query positions fall outside the key range")
    if scale is None:
        scale = default_scale(d)
    kh = np.ascontiguousarray(np.swapaxes(k, 0, 1), dtype=np.float32)  # [h, n, d]
    vh = np.ascontiguousarray(np.swapaxes(v, 0, 1), dtype=np.float32)
    out = np.empty((n_q, h, d), dtype=np.float32)
    for b0 in range(0, n_q, block):
        b1 = min(b0 + block, n_q)
        last = q_start + b1  # keys beyond the block's last position are always masked
        qh = np.swapaxes(q[b0:b1], 0, 1).astype(np.float32)  # [h, r, d]
        w = np.matmul(qh, np.swapaxes(kh[:, :last], 1, 2)) * np.float32(scale)
        pos = np.arange(q_start + b0, q_start + b1)
        w = np.where(np.arange(last)[None, :] > pos[:, None], -np.inf, w)
        w -= w.max(axis=-1, keepdims=True)
        e = np.exp(w)
        o = np.matmul(e, vh[:, :last]) / e.sum(axis=-1)[..., None]
        out[b0:b1] = np.swapaxes(o, 0, 1)
    return out
