"""Kernel and end-to-end benchmarks comparing prefix-shared vs monolithic storage."""

from __future__ import annotations

import gc
import logging
import statistics
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from chunkkv.attention import resolve_workers, two_phase_attn
from chunkkv.config import ModelConfig
from chunkkv.engine import Engine, EngineConfig
from chunkkv.kvcache import ChunkAllocator, PrefixTree
from chunkkv.metrics import RunMetrics
from chunkkv.synth import SyntheticModel, hash_combine
from chunkkv.workload import WorkloadSpec, gen_workload

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelResult:
    mode: str
    batch: int
    n_p: int
    n_s: int
    n_c: int
    heads: int
    head_dim: int
    chunk: int
    workers: int
    repeats: int
    latency_ms: float  # summed per-step median kernel time
    token_rate: float
    kv_chunks: int

    def record(self) -> dict:
        return asdict(self)


class _PromptKV:
    """KV supplier that projects the shared prefix once and reuses it."""

    def __init__(self, model: SyntheticModel, prefix: list[int]) -> None:
        self.model = model
        self.n_s = len(prefix)
        self._k, self._v = model.kv_range(prefix, 0, len(prefix)) if prefix else (None, None)

    def supplier(self, tokens: list[int]):
        def supply(start: int, stop: int):
            cut = min(max(start, self.n_s), stop)
            parts_k, parts_v = [], []
            if start < cut:
                parts_k.append(self._k[start:cut])
                parts_v.append(self._v[start:cut])
            if cut < stop:
                k, v = self.model.kv_range(tokens, cut, stop)
                parts_k.append(k)
                parts_v.append(v)
            return np.concatenate(parts_k), np.concatenate(parts_v)

        return supply


def build_batch(
    model_cfg: ModelConfig,
    b: int,
    n_p: int,
    n_s: int,
    mode: str,
    seed: int = 0,
    vocab_size: int = 32000,
) -> tuple[PrefixTree, SyntheticModel, list[int], list[list[int]]]:
    """Fixed batch of ``b`` prompts sharing their first ``n_s`` tokens."""
    if n_s > n_p:
        raise ValueError("n_s must not exceed n_p")
    rng = np.random.default_rng(seed)
    model = SyntheticModel(model_cfg.num_heads, model_cfg.head_dim, seed)
    tree = PrefixTree(model_cfg, ChunkAllocator(model_cfg), share_prefixes=mode == "shared")
    prefix = rng.integers(0, vocab_size, size=n_s).tolist()
    kv = _PromptKV(model, prefix)
    seq_ids, prompts = [], []
    for _ in range(b):
        tokens = prefix + rng.integers(0, vocab_size, size=n_p - n_s).tolist()
        sid, _ = tree.insert_sequence(tokens, kv.supplier(tokens))
        seq_ids.append(sid)
        prompts.append(tokens)
    return tree, model, seq_ids, prompts


def bench_kernel(
    model_cfg: ModelConfig,
    b: int,
    n_p: int,
    n_s: int,
    n_c: int,
    modes: tuple[str, ...] = ("shared", "monolithic"),
    repeats: int = 5,
    workers: int | None = None,
    seed: int = 0,
    checkpoints: tuple[int, ...] | None = None,
) -> list[KernelResult]:
    """Lockstep decode of ``n_c`` tokens for ``b`` sequences, timing only attention.

    All modes decode side by side on identical token streams. At every step
    each mode's kernel runs ``repeats`` times, interleaved across modes so
    drift hits them equally, and the step contributes its median. The first
    step gets one extra untimed warm-up call per mode.

    ``checkpoints`` reports cumulative token rates after each listed number
    of generated tokens (one row per mode and checkpoint) from the same run.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    marks = sorted(set(checkpoints)) if checkpoints else [n_c]
    if marks[0] < 1 or marks[-1] > n_c:
        raise ValueError(f"checkpoints must lie in 1..{n_c}")
    n_c = marks[-1]
    at_mark: dict[int, dict[str, float]] = {}
    workers = resolve_workers(workers)
    batches = {mode: build_batch(model_cfg, b, n_p, n_s, mode, seed) for mode in modes}
    model = next(iter(batches.values()))[1]
    totals = dict.fromkeys(modes, 0.0)
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for step in range(n_c):
            toks = hash_combine(np.uint64(seed), np.arange(b, dtype=np.uint64), np.uint64(step)) % np.uint64(32000)
            q, k, v = model.qkv(toks.astype(np.int64), np.full(b, n_p + step))
            queries = {}
            for mode, (tree, _, seq_ids, _) in batches.items():
                for i, sid in enumerate(seq_ids):
                    tree.append_token(sid, int(toks[i]), k[i], v[i])
                row = {sid: i for i, sid in enumerate(seq_ids)}
                queries[mode] = np.ascontiguousarray(q[[row[s] for s in tree.build_context().seq_order]])
                if step == 0:
                    two_phase_attn(queries[mode], tree, workers=workers)
            samples: dict[str, list[float]] = {mode: [] for mode in modes}
            for _ in range(repeats):
                for mode in modes:
                    tree = batches[mode][0]
                    t0 = time.perf_counter()
                    two_phase_attn(queries[mode], tree, workers=workers)
                    samples[mode].append(time.perf_counter() - t0)
            for mode in modes:
                totals[mode] += statistics.median(samples[mode])
            if step + 1 in marks:
                at_mark[step + 1] = dict(totals)
    finally:
        if gc_was_enabled:
            gc.enable()
    results = []
    for mark, mode in ((mk, md) for mk in marks for md in modes):
        total = at_mark[mark][mode]
        results.append(
            KernelResult(
                mode=mode,
                batch=b,
                n_p=n_p,
                n_s=n_s,
                n_c=mark,
                heads=model_cfg.num_heads,
                head_dim=model_cfg.head_dim,
                chunk=model_cfg.chunk_capacity,
                workers=workers,
                repeats=repeats,
                latency_ms=1000.0 * total,
                token_rate=mark * b / total,
                kv_chunks=batches[mode][0].allocator.used_count,
            )
        )
        log.info("bench-kernel %s n_c=%d: %.1f ms, %.0f tok/s", mode, mark, 1000 * total, mark * b / total)
    return results


def speedup(results: list[KernelResult], n_c: int | None = None) -> float:
    """Shared over monolithic token rate (at checkpoint ``n_c``, default the last)."""
    if n_c is None:
        n_c = max(r.n_c for r in results)
    by_mode = {r.mode: r for r in results if r.n_c == n_c}
    return by_mode["shared"].token_rate / by_mode["monolithic"].token_rate


@dataclass(frozen=True)
class E2EComparison:
    shared: RunMetrics
    monolithic: RunMetrics

    @property
    def kv_bytes_ratio(self) -> float:
        return self.shared.peak_kv_bytes / self.monolithic.peak_kv_bytes

    @property
    def latency_ratio(self) -> float:
        return self.shared.normalized_latency / self.monolithic.normalized_latency

    @property
    def token_rate_ratio(self) -> float:
        return self.shared.token_rate / self.monolithic.token_rate

    def rows(self) -> list[dict]:
        out = []
        for m in (self.shared, self.monolithic):
            row = m.summary()
            row["kv_bytes_ratio"] = self.kv_bytes_ratio
            row["latency_ratio"] = self.latency_ratio
            out.append(row)
        return out


def bench_e2e(spec: WorkloadSpec, cfg: EngineConfig) -> E2EComparison:
    """Run both storage modes on one identical request trace."""
    requests = gen_workload(spec)
    out = {}
    for mode in ("shared", "monolithic"):
        metrics, _ = Engine(replace(cfg, mode=mode)).run(requests)
        out[mode] = metrics
    return E2EComparison(out["shared"], out["monolithic"])
