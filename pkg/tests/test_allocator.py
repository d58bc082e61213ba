import pytest

from chunkkv import ModelConfig
from chunkkv.kvcache import AllocatorError, CapacityError, ChunkAllocator, acquire_chunk, release_chunk

CFG = ModelConfig(num_heads=1, head_dim=2, chunk_capacity=4)


@pytest.fixture()
def alloc() -> ChunkAllocator:
    return ChunkAllocator(CFG, initial_slots=2)


class TestAcquire:
    def test_cold_start(self, alloc):
        chunk = acquire_chunk(alloc)
        assert len(chunk) == 0
        assert alloc.used_count == 1
        assert alloc.created == 1

    def test_reuses_released_chunk(self, alloc):
        chunk = alloc.acquire()
        release_chunk(alloc, chunk)
        again = alloc.acquire()
        assert again is chunk
        assert alloc.created == 1

    def test_acquire_release_cycle_counts(self, alloc):
        # replay the op sequence against plain counters
        used = created = high = 0
        free = 0
        chunks = []
        for _ in range(100):
            chunks.append(alloc.acquire())
            if free:
                free -= 1
            else:
                created += 1
            used += 1
            high = max(high, used)
        for ch in chunks:
            alloc.release(ch)
            used -= 1
            free += 1
        chunks = [alloc.acquire() for _ in range(100)]
        free -= 100
        used += 100
        assert (alloc.used_count, alloc.free_count, alloc.created, alloc.high_water_mark) == (used, free, created, high)
        assert alloc.high_water_mark == 100
        assert alloc.created == 100

    def test_arena_growth_keeps_payload(self, alloc):
        import numpy as np

        first = alloc.acquire()
        first.write([1, 2], np.ones((2, 1, 2)), np.full((2, 1, 2), 2.0))
        for _ in range(10):
            alloc.acquire()
        assert alloc.keys.shape[0] >= 11
        assert np.all(first.keys[:, :2] == 1.0)
        assert np.all(first.values[:, :2] == 2.0)

    def test_hard_cap(self):
        alloc = ChunkAllocator(CFG, max_chunks=2)
        alloc.acquire()
        alloc.acquire()
        with pytest.raises(CapacityError):
            alloc.acquire()


class TestRelease:
    def test_release_moves_counts(self, alloc):
        chunk = alloc.acquire()
        alloc.release(chunk)
        assert alloc.used_count == 0
        assert alloc.free_count == 1

    def test_double_release(self, alloc):
        chunk = alloc.acquire()
        alloc.release(chunk)
        with pytest.raises(AllocatorError, match="double release"):
            alloc.release(chunk)

    def test_release_referenced(self, alloc):
        chunk = alloc.acquire()
        chunk.ref_count = 1
        with pytest.raises(AllocatorError, match="still referenced"):
            alloc.release(chunk)

    def test_release_clears_metadata(self, alloc):
        import numpy as np

        chunk = alloc.acquire()
        chunk.write([5], np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))
        chunk.start_pos = 8
        alloc.release(chunk)
        assert chunk.tokens == [] and chunk.start_pos == 0

    def test_conservation_never_shrinks(self, alloc):
        totals = []
        live = []
        for k in range(50):
            if k % 3 == 2 and live:
                alloc.release(live.pop())
            else:
                live.append(alloc.acquire())
            totals.append(alloc.used_count + alloc.free_count)
            assert alloc.used_count + alloc.free_count == alloc.created
        assert totals == sorted(totals)
