import json

import pytest

from chunkkv.bench.report import parse, records, render, report

ROW = {"mode": "shared", "batch": 32, "token_rate": 1234.5678901234, "latency_ms": 0.1, "ok": True}


class TestRender:
    def test_empty_csv_header_only(self):
        assert render([], "csv", columns=["a", "b"]) == "a,b\n"

    def test_empty_jsonl(self):
        assert render([], "jsonl", columns=["a"]) == ""

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_round_trip(self, fmt):
        assert parse(render([ROW], fmt), fmt) == [ROW]

    def test_column_order_stable(self):
        text = render([{"b": 1, "a": 2}, {"a": 3, "b": 4}], "csv")
        assert text == "b,a\n1,2\n4,3\n"

    def test_explicit_columns(self):
        text = render([ROW], "jsonl", columns=["batch", "mode"])
        assert list(json.loads(text)) == ["batch", "mode"]

    def test_table_alignment(self):
        lines = render([ROW, dict(ROW, mode="monolithic")], "table").splitlines()
        assert len({len(line) for line in lines}) == 1
        assert lines[1].strip("- ") == ""

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render([ROW], "xml")

    def test_nonfinite(self):
        assert parse(render([{"x": float("inf")}], "csv"))[0]["x"] == float("inf")


class TestReport:
    def test_writes_file(self, tmp_path):
        out = tmp_path / "r.csv"
        text = report([ROW], "csv", out)
        assert out.read_text() == text

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            report([ROW], "csv", tmp_path / "missing" / "r.csv")

    def test_records(self):
        class Item:
            def record(self):
                return {"k": 1}

        assert records([Item(), {"k": 2}]) == [{"k": 1}, {"k": 2}]
