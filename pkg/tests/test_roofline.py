from pathlib import Path

import pytest

from chunkkv.bench.report import parse, render
from chunkkv.bench.roofline import PUBLISHED_ATTENTION, estimate_roofline
from chunkkv.cli import main

GOLDEN = Path(__file__).parent / "golden" / "roofline_table1.csv"


class TestEstimate:
    def test_unit_case(self):
        est = estimate_roofline(1, 1, 1, 1, 2)
        assert est.flops == 4
        # kv 2 + q/o 2 + softmax 2, two bytes each
        assert est.mops == 12
        assert est.arithmetic_intensity == 4 / 12

    def test_hand_counts(self):
        est = estimate_roofline(1, 32, 2048, 128)
        assert est.flops == 33_554_432
        assert est.mops == 2 * (16_777_216 + 8_192 + 131_072)

    @pytest.mark.parametrize("b", sorted(PUBLISHED_ATTENTION))
    def test_published_rows(self, b):
        est = estimate_roofline(b, 32, 2048, 128)
        ref = PUBLISHED_ATTENTION[b]
        assert est.flops == pytest.approx(ref["flops"], rel=0.01)
        assert est.mops == pytest.approx(ref["mops"], rel=0.02)
        assert est.arithmetic_intensity == pytest.approx(0.99, abs=0.02)

    def test_linear_in_batch(self):
        one = estimate_roofline(1, 8, 100, 16)
        many = estimate_roofline(7, 8, 100, 16)
        assert (many.flops, many.mops) == (7 * one.flops, 7 * one.mops)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            estimate_roofline(0, 1, 1, 1)


def test_table1_golden(tmp_path):
    out = tmp_path / "roofline.csv"
    assert main(["roofline", "--format", "csv", "--out", str(out)]) == 0
    got, want = parse(out.read_text()), parse(GOLDEN.read_text())
    assert [list(r) for r in got] == [list(r) for r in want]
    for g, w in zip(got, want):
        for key, val in w.items():
            if isinstance(val, float):
                assert g[key] == pytest.approx(val, rel=1e-9)
            else:
                assert g[key] == val


def test_golden_matches_render():
    rows = parse(GOLDEN.read_text())
    assert render(rows, "csv") == GOLDEN.read_text()
