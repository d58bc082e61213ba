from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from chunkkv import ModelConfig
from chunkkv.attention import prefill_attn
from chunkkv.bench.verify import relative_error
from chunkkv.engine import Engine, EngineConfig, Phase, SequenceState, run
from chunkkv.synth import SyntheticModel, synth_qkv
from chunkkv.workload import Request, WorkloadSpec, gen_workload

SMALL = ModelConfig(num_heads=2, head_dim=8, chunk_capacity=4)

# first q component of (seed=0, token=7, pos=3, head=1) at h=4, d=64; pinned from the first build
GOLDEN_Q0 = -0.9860765933990479


def cfg(**kw) -> EngineConfig:
    base = dict(model=SMALL, max_batch_size=8, clock="virtual", workers=1)
    base.update(kw)
    return EngineConfig(**base)


def request(rid, prompt, n_c, t=0.0) -> Request:
    return Request(rid, t, tuple(prompt), n_c, 0)


class TestSynth:
    def test_deterministic(self):
        m = SyntheticModel(2, 8, seed=5)
        a = m.qkv([1, 2, 3], [0, 1, 2])
        b = m.qkv([1, 2, 3], [0, 1, 2])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_same_token_same_position(self):
        m = SyntheticModel(2, 8, seed=5)
        _, k1, v1 = synth_qkv(m, 42, 9, 1)
        _, k2, v2 = synth_qkv(m, 42, 9, 1)
        np.testing.assert_array_equal(k1, k2)
        np.testing.assert_array_equal(v1, v2)
        _, k3, _ = synth_qkv(m, 42, 10, 1)
        assert not np.array_equal(k1, k3)

    def test_range(self):
        q, k, v = SyntheticModel(4, 64).qkv(np.arange(500), np.arange(500))
        for x in (q, k, v):
            assert x.dtype == np.float32
            assert x.min() >= -1.0 and x.max() < 1.0

    def test_golden(self):
        q, _, _ = synth_qkv(SyntheticModel(4, 64, seed=0), 7, 3, 1)
        assert float(q[0]) == GOLDEN_Q0


class TestPrefill:
    def test_full_hit(self):
        eng = Engine(cfg())
        prompt = list(range(3 * 4))
        a = SequenceState(0, tuple(prompt), 5)
        b = SequenceState(1, tuple(prompt), 5)
        eng.prefill(a)
        eng.prefill(b)
        assert (a.projections_computed, a.projections_skipped) == (12, 0)
        assert (b.projections_computed, b.projections_skipped) == (0, 12)
        assert b.phase is Phase.DECODING and len(b.generated) == 1

    def test_aligned_partial_hit(self):
        model = ModelConfig(num_heads=1, head_dim=8, chunk_capacity=64)
        eng = Engine(cfg(model=model))
        prompt = list(range(2048))
        eng.prefill(SequenceState(0, tuple(prompt), 3))
        other = SequenceState(1, tuple(prompt[:2047] + [5]), 3)
        eng.prefill(other)
        assert other.projections_skipped == 1984
        assert other.projections_computed == 64

    def test_wrong_phase(self):
        eng = Engine(cfg())
        seq = SequenceState(0, (1, 2, 3), 4)
        eng.prefill(seq)
        with pytest.raises(ValueError):
            eng.prefill(seq)

    def test_single_token_completion_finishes(self):
        eng = Engine(cfg())
        seq = SequenceState(0, (1, 2, 3), 1)
        eng.prefill(seq)
        assert seq.phase is Phase.FINISHED
        assert eng.allocator.used_count == 0


class TestDecode:
    def test_single_sequence_replay(self):
        eng = Engine(cfg(record_outputs=True))
        prompt = list(range(10, 17))
        (_, states) = eng.run([request(0, prompt, 9)])
        seq = states[0]
        # replay: the full token stream attended causally in one shot
        tokens = prompt + seq.generated[:-1]
        q, k, v = eng.model.qkv(tokens, np.arange(len(tokens)))
        want = prefill_attn(q, k, v)[len(prompt) - 1 :]
        got = np.stack(seq.outputs)
        assert got.shape == want.shape
        assert relative_error(got, want) < 1e-5

    @pytest.mark.parametrize("policy", ["hash", "lockstep"])
    def test_mode_equivalence(self, policy):
        shared_prompt = list(range(9))
        reqs = [request(0, shared_prompt, 12), request(1, shared_prompt, 12), request(2, list(range(50, 57)), 12)]
        runs = {}
        for mode in ("shared", "monolithic"):
            _, states = Engine(cfg(mode=mode, record_outputs=True, token_policy=policy)).run(reqs)
            runs[mode] = states
        for a, b in zip(runs["shared"], runs["monolithic"]):
            assert a.generated == b.generated
            assert relative_error(np.stack(a.outputs), np.stack(b.outputs)) < 1e-4

    def test_lockstep_emits_identical_tokens(self):
        reqs = [request(i, list(range(8)), 6) for i in range(3)]
        _, states = Engine(cfg(token_policy="lockstep")).run(reqs)
        assert states[0].generated == states[1].generated == states[2].generated

    def test_finishing_shrinks_batch(self):
        eng = Engine(cfg())
        short = SequenceState(0, tuple(range(6)), 2)
        long = SequenceState(1, tuple(range(6)), 5)
        eng.prefill(short)
        eng.prefill(long)
        epoch = eng.tree.epoch
        out, _ = eng.decode_step()
        assert set(out) == {0, 1}
        assert short.phase is Phase.FINISHED
        assert eng.tree.epoch > epoch
        out, _ = eng.decode_step()
        assert set(out) == {1}
        assert eng.tree.build_context().batch_size == 1

    def test_decode_needs_live(self):
        with pytest.raises(RuntimeError):
            Engine(cfg()).decode_step()


class TestRun:
    def test_burst_peak(self):
        b, n_p, n_c, c = 6, 8, 9, 4
        spec = WorkloadSpec(lam=math.inf, request_count=b, n_p=n_p, n_s=n_p, n_c=n_c)
        m, _ = Engine(cfg(max_batch_size=b)).run(gen_workload(spec))
        assert m.peak_batch_size == b
        # KV holds n_p + n_c - 1 tokens when the last token is chosen
        private = -(-(n_c - 1) // c)
        assert m.peak_kv_chunks == n_p // c + b * private
        assert m.peak_kv_bytes == m.peak_kv_chunks * SMALL.chunk_bytes

    def test_batch_cap(self):
        spec = WorkloadSpec(lam=math.inf, request_count=10, n_p=6, n_s=4, n_c=4)
        eng = Engine(cfg(max_batch_size=3))
        seen = []
        orig = eng.decode_step

        def spy():
            seen.append(len(eng.live))
            return orig()

        eng.decode_step = spy
        m, _ = eng.run(gen_workload(spec))
        assert max(seen) == m.peak_batch_size == 3

    def test_lifecycle_and_accounting(self):
        spec = WorkloadSpec(lam=50.0, request_count=12, n_p=10, n_s=6, n_c=7, prompt_pool=2, seed=4)
        eng = Engine(cfg(max_batch_size=4))
        m, states = eng.run(gen_workload(spec))
        assert all(s.phase is Phase.FINISHED for s in states)
        assert eng.allocator.used_count == 0
        assert eng.allocator.free_count == eng.allocator.created == eng.allocator.high_water_mark
        assert m.projections_computed + m.projections_skipped == 12 * 10
        assert m.completion_tokens == 12 * 7
        assert all(t.finish_time >= t.first_token_time >= t.admit_time >= t.arrival_time for t in m.traces)

    def test_single_request_latency(self):
        m = run(WorkloadSpec(lam=1.0, request_count=1, n_p=8, n_c=5), cfg())
        t = m.traces[0]
        assert m.normalized_latency == pytest.approx(1000 * (t.finish_time - t.arrival_time) / 5)
        assert m.token_rate == pytest.approx(5 / m.decode_time)

    def test_deterministic(self):
        spec = WorkloadSpec(lam=20.0, request_count=8, n_p=12, n_s=8, n_c=6, seed=2)
        a = run(spec, cfg())
        b = run(spec, cfg())
        assert a == b

    def test_shared_uses_less_memory(self):
        spec = WorkloadSpec(lam=math.inf, request_count=8, n_p=32, n_s=32, n_c=5)
        shared = run(spec, cfg())
        mono = run(spec, cfg(mode="monolithic"))
        assert shared.peak_kv_bytes < 0.3 * mono.peak_kv_bytes
        assert shared.completion_tokens == mono.completion_tokens

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EngineConfig(mode="paged")
        with pytest.raises(ValueError):
            EngineConfig(max_batch_size=0)
        with pytest.raises(ValueError):
            replace(EngineConfig(), clock="sundial")
