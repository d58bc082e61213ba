from __future__ import annotations

import numpy as np
import pytest

from chunkkv import ModelConfig
from chunkkv.kvcache import ChunkAllocator, PrefixTree
from chunkkv.synth import SyntheticModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture()
def small_cfg() -> ModelConfig:
    return ModelConfig(num_heads=2, head_dim=8, chunk_capacity=4)


@pytest.fixture()
def model(small_cfg) -> SyntheticModel:
    return SyntheticModel(small_cfg.num_heads, small_cfg.head_dim, seed=3)


@pytest.fixture()
def tree(small_cfg) -> PrefixTree:
    return PrefixTree(small_cfg, ChunkAllocator(small_cfg))


def supplier_for(model: SyntheticModel, tokens, calls: list | None = None):
    def supply(start: int, stop: int):
        if calls is not None:
            calls.append((start, stop))
        return model.kv_range(list(tokens), start, stop)

    return supply


def append_decode(tree: PrefixTree, model: SyntheticModel, seq_id: int, token: int) -> None:
    pos = tree.seq_len(seq_id)
    _, k, v = model.qkv([token], [pos])
    tree.append_token(seq_id, token, k[0], v[0])


def random_q(rng: np.random.Generator, b: int, cfg: ModelConfig) -> np.ndarray:
    return rng.uniform(-1, 1, size=(b, cfg.num_heads, cfg.head_dim)).astype(np.float32)
