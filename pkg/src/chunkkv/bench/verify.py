"""Randomized equivalence check: two-phase kernel vs the naive softmax oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from chunkkv.attention import default_scale, naive_attn_tree, two_phase_attn
from chunkkv.config import ModelConfig
from chunkkv.kvcache import PrefixTree
from chunkkv.synth import SyntheticModel

HEADS = (1, 4)
HEAD_DIMS = (8, 64, 128)
CHUNKS = (2, 16, 64)


@dataclass
class Case:
    seed: int
    b: int
    h: int
    d: int
    c: int
    shared: int
    logit_scale: float
    direct_reduce: bool
    workers: int


@dataclass
class VerifyReport:
    passed: int = 0
    failed: int = 0
    max_rel_err: float = 0.0
    failures: list[tuple[Case, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed == 0


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """Worst per-(sequence, head) error, relative to that row's magnitude."""
    diff = np.abs(got.astype(np.float64) - want).max(axis=-1)
    mag = np.maximum(np.abs(want).max(axis=-1), 1e-6)
    return float((diff / mag).max())


def random_case(rng: np.random.Generator, seed: int) -> Case:
    c = int(rng.choice(CHUNKS))
    return Case(
        seed=seed,
        b=int(rng.integers(1, 9)),
        h=int(rng.choice(HEADS)),
        d=int(rng.choice(HEAD_DIMS)),
        c=c,
        shared=int(rng.integers(0, 4 * c + 1)),
        logit_scale=float(rng.uniform(0.0, 80.0)),
        direct_reduce=bool(rng.random() < 0.25),
        workers=int(rng.integers(1, 5)),
    )


def build_case_tree(case: Case, share_prefixes: bool = True) -> tuple[PrefixTree, np.ndarray]:
    """Tree and query batch for one case (queries in batch-index order)."""
    rng = np.random.default_rng(case.seed)
    cfg = ModelConfig(num_heads=case.h, head_dim=case.d, chunk_capacity=case.c)
    model = SyntheticModel(case.h, case.d, seed=case.seed)
    tree = PrefixTree(cfg, share_prefixes=share_prefixes)
    prefix = rng.integers(0, 1000, size=case.shared).tolist()
    prompts = []
    for _ in range(case.b):
        suffix_len = int(rng.integers(0 if case.shared else 1, 2 * case.c + 1))
        prompt = prefix + rng.integers(0, 1000, size=suffix_len).tolist()
        if prompts and rng.random() < 0.2:
            prompt = list(prompts[int(rng.integers(len(prompts)))])  # exact duplicate
        prompts.append(prompt)
        tree.insert_sequence(prompt, lambda a, z, p=prompt: model.kv_range(p, a, z))
    # a few decode appends: exercises shared-leaf branching and partial leaves
    for sid in tree.sequence_ids:
        for _ in range(int(rng.integers(0, case.c + 2))):
            pos = tree.seq_len(sid)
            tok = int(rng.integers(0, 1000))
            _, k, v = model.qkv([tok], [pos])
            tree.append_token(sid, tok, k[0], v[0])
    q = rng.uniform(-1.0, 1.0, size=(case.b, case.h, case.d)).astype(np.float32)
    order = tree.build_context().seq_order
    max_logit = 0.0
    for row, sid in enumerate(order):
        keys, _ = tree.gather_kv(sid)
        w = np.einsum("hd,hnd->hn", q[row], keys) * default_scale(case.d)
        max_logit = max(max_logit, float(np.abs(w).max()))
    if max_logit > 0 and case.logit_scale > 0:
        q *= np.float32(case.logit_scale / max_logit)
    return tree, q


def check_case(case: Case) -> float:
    tree, q = build_case_tree(case)
    got = two_phase_attn(q, tree, direct_reduce=case.direct_reduce, workers=case.workers)
    want = naive_attn_tree(q, tree)
    return relative_error(got, want)


def run_verify(cases: int = 1000, seed: int = 0, tol: float = 1e-4) -> VerifyReport:
    rng = np.random.default_rng(seed)
    report = VerifyReport()
    for k in range(cases):
        case = random_case(rng, seed=seed * 1_000_003 + k)
        err = check_case(case)
        report.max_rel_err = max(report.max_rel_err, err)
        if err < tol:
            report.passed += 1
        else:
            report.failed += 1
            report.failures.append((case, err))
    return report
