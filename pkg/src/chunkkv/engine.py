"""Iteration-batched decode engine over the prefix tree.

The scheduler loop is single threaded and owns every tree mutation; only the
attention kernel fans out to worker threads. Time advances by the measured
wall-clock cost of each prefill and decode step (``clock="wall"``), or by a
fixed cost model (``clock="virtual"``) when byte-identical reruns matter.
"""

from __future__ import annotations

import enum
import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from chunkkv.attention import prefill_attn, resolve_workers, two_phase_attn
from chunkkv.config import ModelConfig
from chunkkv.kvcache import ChunkAllocator, PrefixTree
from chunkkv.metrics import RequestTrace, RunMetrics, normalized_latency
from chunkkv.synth import SyntheticModel, hash_combine
from chunkkv.workload import Request, WorkloadSpec, gen_workload

log = logging.getLogger(__name__)

MODES = ("shared", "monolithic")
CLOCKS = ("wall", "virtual")
POLICIES = ("hash", "lockstep")


class Phase(enum.Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    FINISHED = "finished"


@dataclass
class CostModel:
    """Deterministic step costs for the virtual clock (seconds)."""

    step_overhead: float = 50e-6
    per_sequence: float = 5e-6
    projection: float = 2e-6  # per position, all heads
    bandwidth: float = 10e9  # bytes/s for KV reads
    flop_rate: float = 20e9

    def decode(self, chunk_reads: int, chunk_bytes: int, batch: int) -> float:
        return self.step_overhead + batch * self.per_sequence + chunk_reads * chunk_bytes / self.bandwidth

    def prefill(self, computed: int, n_q: int, n_k: int, heads: int, dim: int) -> float:
        flops = 4.0 * n_q * n_k * heads * dim
        return self.step_overhead + computed * self.projection + flops / self.flop_rate


@dataclass
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    max_batch_size: int = 32
    mode: str = "shared"
    share_threshold: int = 2
    seed: int = 0
    vocab_size: int = 32000
    token_policy: str = "hash"
    clock: str = "wall"
    workers: int | None = None
    direct_reduce: bool = False
    max_chunks: int | None = None
    record_outputs: bool = False
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {CLOCKS}, got {self.clock!r}")
        if self.token_policy not in POLICIES:
            raise ValueError(f"token_policy must be one of {POLICIES}, got {self.token_policy!r}")


@dataclass
class SequenceState:
    request_id: int
    prompt_tokens: tuple[int, ...]
    target_n_c: int
    arrival_time: float = 0.0
    generated: list[int] = field(default_factory=list)
    admit_time: float = float("nan")
    first_token_time: float = float("nan")
    finish_time: float = float("nan")
    phase: Phase = Phase.QUEUED
    tree_id: int = -1
    matched_tokens: int = 0
    projections_computed: int = 0
    projections_skipped: int = 0
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def n_p(self) -> int:
        return len(self.prompt_tokens)

    def trace(self) -> RequestTrace:
        return RequestTrace(
            request_id=self.request_id,
            arrival_time=self.arrival_time,
            admit_time=self.admit_time,
            first_token_time=self.first_token_time,
            finish_time=self.finish_time,
            n_p=self.n_p,
            n_c=self.target_n_c,
            matched_tokens=self.matched_tokens,
            projections_computed=self.projections_computed,
            projections_skipped=self.projections_skipped,
        )


class Engine:
    def __init__(self, cfg: EngineConfig) -> None:
        self.cfg = cfg
        m = cfg.model
        self.model = SyntheticModel(m.num_heads, m.head_dim, cfg.seed)
        self.allocator = ChunkAllocator(m, max_chunks=cfg.max_chunks)
        self.tree = PrefixTree(
            m,
            self.allocator,
            share_prefixes=cfg.mode == "shared",
            share_threshold=cfg.share_threshold,
        )
        self.workers = resolve_workers(cfg.workers)
        self.live: dict[int, SequenceState] = {}  # tree id -> state
        self.step_index = 0
        self.peak_chunks = 0

    # -- token policy ----------------------------------------------------

    def _next_tokens(self, states: list[SequenceState], outputs: np.ndarray) -> list[int]:
        """Next token per sequence from its attention output.

        Only the sign pattern of the first output components feeds the hash,
        so rounding differences between kernel schedules cannot flip a token
        unless a component sits within float noise of zero.
        """
        if self.cfg.token_policy == "lockstep":
            z = hash_combine(np.uint64(self.cfg.seed), np.uint64(len(states[0].generated)), np.uint64(0xC0FFEE))
            return [int(z % np.uint64(self.cfg.vocab_size))] * len(states)
        flat = outputs.reshape(len(states), -1)[:, :16]
        bits = ((flat > 0).astype(np.uint64) << np.arange(flat.shape[1], dtype=np.uint64)).sum(axis=1)
        ids = np.array([s.request_id for s in states], dtype=np.uint64)
        steps = np.array([len(s.generated) for s in states], dtype=np.uint64)
        z = hash_combine(np.uint64(self.cfg.seed), ids, steps, bits)
        return [int(t) for t in z % np.uint64(self.cfg.vocab_size)]

    # -- phases ----------------------------------------------------------

    def _track_peak(self) -> None:
        self.peak_chunks = max(self.peak_chunks, self.allocator.used_count)

    def prefill(self, seq: SequenceState) -> float:
        """Insert the prompt, run causal prefill attention, emit the first token.

        Returns the step's elapsed time on the engine clock.
        """
        if seq.phase is not Phase.QUEUED:
            raise ValueError(f"request {seq.request_id} is {seq.phase.value}, expected queued")
        seq.phase = Phase.PREFILLING
        t0 = time.perf_counter()
        tokens = list(seq.prompt_tokens)
        computed = 0

        def supplier(start: int, stop: int):
            nonlocal computed
            computed += stop - start
            return self.model.kv_range(tokens, start, stop)

        tree_id, matched = self.tree.insert_sequence(tokens, supplier)
        seq.tree_id, seq.matched_tokens = tree_id, matched
        seq.projections_computed = computed
        seq.projections_skipped = seq.n_p - computed
        # matched prefix KV comes from the tree; only the unmatched tail needs queries,
        # plus the last position on a full hit so the first token can be produced
        q_start = min(matched, seq.n_p - 1)
        q, _, _ = self.model.qkv(tokens[q_start:], np.arange(q_start, seq.n_p))
        keys, values = self.tree.gather_kv(tree_id)
        out = prefill_attn(q, np.swapaxes(keys, 0, 1), np.swapaxes(values, 0, 1), q_start=q_start)
        last = out[-1:]
        seq.generated.append(self._next_tokens([seq], last)[0])
        if self.cfg.record_outputs:
            seq.outputs.append(last[0].copy())
        self._track_peak()
        elapsed = time.perf_counter() - t0
        if self.cfg.clock == "virtual":
            m = self.cfg.model
            elapsed = self.cfg.cost.prefill(computed, len(q), seq.n_p, m.num_heads, m.head_dim)
        if len(seq.generated) >= seq.target_n_c:
            self._finish(seq)
        else:
            seq.phase = Phase.DECODING
            self.live[tree_id] = seq
        return elapsed

    def _finish(self, seq: SequenceState) -> None:
        seq.phase = Phase.FINISHED
        self.tree.remove_sequence(seq.tree_id)
        self.live.pop(seq.tree_id, None)

    def decode_step(self) -> tuple[dict[int, int], float]:
        """One iteration for every decoding sequence.

        Each sequence's newest token is projected, its key/value appended to
        the tree, and its query attends over the whole cache. Returns
        ``({request_id: next_token}, elapsed)``.
        """
        if not self.live:
            raise RuntimeError("decode_step needs at least one decoding sequence")
        t0 = time.perf_counter()
        states = list(self.live.values())
        tokens = [s.generated[-1] for s in states]
        positions = [s.n_p + len(s.generated) - 1 for s in states]
        q, k, v = self.model.qkv(tokens, positions)
        for i, s in enumerate(states):
            self.tree.append_token(s.tree_id, tokens[i], k[i], v[i])
        self._track_peak()
        ctx = self.tree.build_context()
        row = {s.tree_id: i for i, s in enumerate(states)}
        ordered = [self.live[tid] for tid in ctx.seq_order]
        qb = q[[row[tid] for tid in ctx.seq_order]]
        out = two_phase_attn(qb, self.tree, workers=self.workers, direct_reduce=self.cfg.direct_reduce)
        nxt = self._next_tokens(ordered, out)
        result: dict[int, int] = {}
        for s, tok, o in zip(ordered, nxt, out):
            s.generated.append(tok)
            result[s.request_id] = tok
            if self.cfg.record_outputs:
                s.outputs.append(o.copy())
        chunk_reads = len(ctx.shared_entries) + sum(len(p) for p in ctx.private_entries)
        for s in ordered:
            if len(s.generated) >= s.target_n_c:
                self._finish(s)
        self.step_index += 1
        elapsed = time.perf_counter() - t0
        if self.cfg.clock == "virtual":
            elapsed = self.cfg.cost.decode(chunk_reads, self.cfg.model.chunk_bytes, len(ordered))
        return result, elapsed

    # -- driver ----------------------------------------------------------

    def run(self, requests: list[Request]) -> tuple[RunMetrics, list[SequenceState]]:
        states = [SequenceState(r.request_id, r.prompt, r.n_c, r.arrival_time) for r in requests]
        pending = deque(sorted(states, key=lambda s: (s.arrival_time, s.request_id)))
        waiting: deque[SequenceState] = deque()
        now = 0.0
        decode_time = 0.0
        steps = 0
        peak_batch = 0
        while pending or waiting or self.live:
            while pending and pending[0].arrival_time <= now:
                waiting.append(pending.popleft())
            if not waiting and not self.live:
                now = pending[0].arrival_time
                continue
            while waiting and len(self.live) < self.cfg.max_batch_size:
                seq = waiting.popleft()
                seq.admit_time = now
                now += self.prefill(seq)
                seq.first_token_time = now
                if seq.phase is Phase.FINISHED:
                    seq.finish_time = now
            if self.live:
                peak_batch = max(peak_batch, len(self.live))
                decoding = list(self.live.values())
                _, dt = self.decode_step()
                now += dt
                decode_time += dt
                steps += 1
                for s in decoding:
                    if s.phase is Phase.FINISHED:
                        s.finish_time = now
        traces = [s.trace() for s in sorted(states, key=lambda s: s.request_id)]
        completion = sum(len(s.generated) for s in states)
        metrics = RunMetrics(
            mode=self.cfg.mode,
            normalized_latency=normalized_latency(traces),
            token_rate=completion / decode_time if decode_time > 0 else 0.0,
            peak_kv_bytes=self.peak_chunks * self.cfg.model.chunk_bytes,
            peak_kv_chunks=self.peak_chunks,
            peak_batch_size=peak_batch,
            decode_time=decode_time,
            total_time=now,
            completion_tokens=completion,
            decode_steps=steps,
            projections_computed=sum(s.projections_computed for s in states),
            projections_skipped=sum(s.projections_skipped for s in states),
            traces=traces,
        )
        log.debug("run finished: %s", metrics.summary())
        return metrics, states


def run(workload: WorkloadSpec | list[Request], cfg: EngineConfig) -> RunMetrics:
    requests = gen_workload(workload) if isinstance(workload, WorkloadSpec) else workload
    metrics, _ = Engine(cfg).run(requests)
    return metrics
