import math

import numpy as np
import pytest

from chunkkv.workload import WorkloadSpec, gen_workload, trace_lines


class TestGenWorkload:
    def test_mean_gap(self):
        reqs = gen_workload(WorkloadSpec(lam=1.0, request_count=1000, n_p=4, n_s=0, n_c=1))
        gaps = np.diff([0.0] + [r.arrival_time for r in reqs])
        assert 0.9 <= gaps.mean() <= 1.1
        assert np.all(gaps >= 0)

    def test_full_prompt_shared(self):
        reqs = gen_workload(WorkloadSpec(request_count=5, n_p=16, n_s=16))
        assert len({r.prompt for r in reqs}) == 1

    def test_prefix_then_suffix(self):
        reqs = gen_workload(WorkloadSpec(request_count=4, n_p=16, n_s=10))
        assert len({r.prompt[:10] for r in reqs}) == 1
        assert len({r.prompt[10:] for r in reqs}) == 4

    def test_pool_per_request(self):
        reqs = gen_workload(WorkloadSpec(request_count=6, n_p=32, n_s=32, prompt_pool=6))
        assert len({r.prompt[:8] for r in reqs}) == 6
        assert [r.pool for r in reqs] == list(range(6))

    def test_burst(self):
        reqs = gen_workload(WorkloadSpec(lam=math.inf, request_count=3))
        assert [r.arrival_time for r in reqs] == [0.0, 0.0, 0.0]

    def test_deterministic(self):
        spec = WorkloadSpec(lam=3.0, request_count=20, n_p=8, n_s=3, seed=9)
        assert trace_lines(gen_workload(spec)) == trace_lines(gen_workload(spec))
        other = WorkloadSpec(lam=3.0, request_count=20, n_p=8, n_s=3, seed=10)
        assert trace_lines(gen_workload(spec)) != trace_lines(gen_workload(other))

    @pytest.mark.parametrize(
        "kw", [dict(n_s=9, n_p=8), dict(lam=0.0), dict(n_c=0), dict(prompt_pool=0), dict(request_count=-1)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            WorkloadSpec(**kw)
