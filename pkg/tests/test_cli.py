import csv
import json

import pytest

from fedsel.cli import (
    EXIT_OK,
    EXIT_RETRIES,
    EXIT_TRANSPORT,
    EXIT_USAGE,
    EXIT_VALIDATION,
    BenchRow,
    BENCH_COLUMNS,
    format_bench_table,
    main,
)

SMALL = ["--n-samples", "400", "--n-features", "6", "--rounds", "6", "--seed", "1"]


def _only_dir(root):
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def _run(tmp_path, *args):
    return main([*args, *SMALL, "--out", str(tmp_path / "runs")])


class TestExitCodes:
    def test_distinct(self):
        assert len({EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_RETRIES, 1}) == 6

    def test_usage(self, tmp_path):
        assert main(["fly"]) == EXIT_USAGE
        assert main(["run", "--rounds", "many"]) == EXIT_USAGE

    def test_validation(self, tmp_path):
        assert _run(tmp_path, "run", "--strategy", "{'strategy_name': 'fed_trimmed_avg', 'beta': 0.7}") == EXIT_VALIDATION
        assert _run(tmp_path, "run", "--holdout", "1.5") == EXIT_VALIDATION
        assert _run(tmp_path, "run", "--n-clients", "1") == EXIT_VALIDATION

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert main(["run", "--config", str(tmp_path / "c.json")]) == EXIT_VALIDATION
        (tmp_path / "d.json").write_text(json.dumps({"data": {}}))
        assert main(["run", "--config", str(tmp_path / "d.json")]) == EXIT_USAGE

    def test_transport(self, tmp_path):
        code = _run(tmp_path, "recommend", "--backend-url", "http://127.0.0.1:9", "--model", "m", "--timeout", "0.2")
        assert code == EXIT_TRANSPORT

    def test_retries_exhausted(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps(["no", "still no", "{'strategy_name': 'fed_nova'}"]))
        code = _run(tmp_path, "recommend", "--describe", "mild skew", "--mock-echo", str(tmp_path / "bad.json"))
        assert code == EXIT_RETRIES
        assert "response 3" in capsys.readouterr().err
        failure = json.loads((_only_dir(tmp_path / "runs") / "advisor_failure.json").read_text())
        assert len(failure["raw_responses"]) == 3


class TestCommands:
    def test_run_writes_config_first_and_metrics(self, tmp_path):
        assert _run(tmp_path, "run") == EXIT_OK
        d = _only_dir(tmp_path / "runs")
        assert d.name.split("-")[-1].isalnum() and len(d.name.split("-")[-1]) == 8
        cfg = json.loads((d / "config.json").read_text())
        assert cfg["command"] == "run" and cfg["rounds"] == 6
        rows = list(csv.reader((d / "metrics.csv").open()))
        assert len(rows) == 7 and rows[0][:2] == ["round", "weighted_accuracy"]
        summary = json.loads((d / "summary.json").read_text())
        assert summary["artifacts"]["metrics"] == "metrics.csv"

    def test_rerun_from_snapshot_is_identical(self, tmp_path):
        assert _run(tmp_path, "run", "--scenario", "feature_skew") == EXIT_OK
        first = _only_dir(tmp_path / "runs")
        assert main(["run", "--config", str(first / "config.json"), "--out", str(tmp_path / "again")]) == EXIT_OK
        second = _only_dir(tmp_path / "again")
        assert (first / "metrics.csv").read_text() == (second / "metrics.csv").read_text()

    def test_mock_recommend_on_iid(self, tmp_path, capsys):
        code = main(["recommend", "--mock", "--seed", "0", "--out", str(tmp_path / "runs")])
        assert code == EXIT_OK
        d = _only_dir(tmp_path / "runs")
        assert len((d / "metrics.csv").read_text().splitlines()) == 31
        out = capsys.readouterr().out
        assert "fed_avg" in out and (d / "report.json").exists()

    def test_describe_with_scripted_backend(self, tmp_path, capsys):
        (tmp_path / "r.txt").write_text("{'strategy_name': 'fed_median'}\n")
        code = _run(tmp_path, "recommend", "--describe", "one client may be broken", "--scripted", str(tmp_path / "r.txt"))
        assert code == EXIT_OK
        d = _only_dir(tmp_path / "runs")
        assert not (d / "report.json").exists()
        assert "fed_median" in (d / "strategy.txt").read_text()
        lines = [json.loads(l) for l in (d / "transcript.jsonl").read_text().splitlines()]
        assert lines[0]["user"].endswith("one client may be broken")

    def test_detect(self, tmp_path, capsys):
        assert _run(tmp_path, "detect", "--scenario", "label_skew", "--n-samples", "2000") == EXIT_OK
        assert "Label Skew: Yes" in capsys.readouterr().out

    def test_gen_data_and_partition(self, tmp_path):
        assert main(["gen-data", str(tmp_path / "d.csv"), *SMALL]) == EXIT_OK
        assert main(["partition", str(tmp_path / "parts"), "--data", str(tmp_path / "d.csv"), "--label-column", "label"]) == EXIT_OK
        assert sorted(p.name for p in (tmp_path / "parts").iterdir()) == [
            "client_0.csv", "client_1.csv", "client_2.csv", "client_3.csv", "spec.json"
        ]

    def test_search_and_resume(self, tmp_path):
        assert _run(tmp_path, "search") == EXIT_OK
        d = _only_dir(tmp_path / "runs")
        assert len(list((d / "trials").iterdir())) == 8
        lines = (d / "archive.jsonl").read_text().splitlines()
        assert len(lines) == 8
        best = json.loads((d / "summary.json").read_text())["best"]
        (d / "archive.jsonl").write_text("\n".join(lines[:6]) + "\n")
        assert main(["search", "--resume", str(d)]) == EXIT_OK
        summary = json.loads((d / "summary.json").read_text())
        assert summary["evaluations_this_session"] == 2 and summary["best"] == best
        assert len((d / "archive.jsonl").read_text().splitlines()) == 8

    def test_search_needs_fitness_window(self, tmp_path):
        assert main(["search", "--rounds", "3", "--out", str(tmp_path)]) == EXIT_VALIDATION

    def test_hpo_ref(self, tmp_path):
        assert _run(tmp_path, "hpo-ref", "--trials", "6") == EXIT_OK
        d = _only_dir(tmp_path / "runs")
        s = json.loads((d / "summary.json").read_text())
        assert s["worst_fitness"] <= s["best_fitness"] and len(list((d / "trials").iterdir())) == 6

    def test_bench_single_repetition(self, tmp_path, capsys):
        assert _run(tmp_path, "bench", "-R", "1", "--trials", "9") == EXIT_OK
        d = _only_dir(tmp_path / "runs")
        rows = list(csv.reader((d / "bench.csv").open()))
        assert rows[0] == ["statistic", *BENCH_COLUMNS]
        assert rows[2] == ["std"] + [""] * 5
        assert "std not reported" in capsys.readouterr().err


class TestBenchTable:
    def _row(self, seed, base):
        vals = {c: base + i / 100 for i, c in enumerate(BENCH_COLUMNS)}
        return BenchRow(seed, vals, {c: 1.0 for c in BENCH_COLUMNS})

    def test_mean_and_std(self):
        rows, text = format_bench_table([self._row(0, 0.5), self._row(1, 0.7)])
        assert rows[1][1] == "0.6000" and rows[2][1] == "0.1414"
        assert "±" in text and "(R = 2)" in text

    def test_empty(self):
        with pytest.raises(ValueError):
            format_bench_table([])
