"""CLI surface: exit codes, CSV schemas, overrides, determinism."""

import json
import time

from quoka.cli import main
from quoka.experiments import BENCH_SCHEMA, METRICS_SCHEMA


def tiny_verify_args(*extra):
    return ["verify",
            "--set", "verify.instances=4",
            "--set", "verify.oracle_instances=4",
            "--set", "verify.linearity_draws=20",
            "--set", "verify.theorem_trials=200",
            *extra]


def tiny_ablate_args(out, *extra):
    return ["ablate", "--out", str(out),
            "--set", "ablate.T=96", "--set", "ablate.B_CP=16",
            "--set", "ablate.seeds=2", "--set", 'ablate.layout={"n_q":4,"n_kv":2,"d":16}',
            "--set", "ablate.B_SA_grid=[10]", "--set", "ablate.N_Q_grid=[4]",
            "--set", "ablate.needles=2",
            *extra]


class TestVerifyCommand:
    def test_default_config_passes(self, capsys):
        assert main(tiny_verify_args()) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 5 and "FAIL" not in out

    def test_zero_tolerance_fails(self, capsys):
        code = main(tiny_verify_args("--set", "tolerances.chunked_vs_dense=0"))
        assert code == 1
        out = capsys.readouterr().out
        assert "FAIL chunked_equals_dense" in out
        assert "reproduce with seed=" in out

    def test_unparseable_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["verify", "--config", str(bad)]) == 2

    def test_unknown_section(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"mystery": 1}))
        assert main(["verify", "--config", str(bad)]) == 2

    def test_bad_set_expression(self):
        assert main(["verify", "--set", "no_equals_sign"]) == 2

    def test_report_written(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert main(tiny_verify_args("--out", str(out))) == 0
        report = json.loads(out.read_text())
        assert set(report) == {"config", "fixture_hashes", "metrics", "environment", "timings"}
        assert report["environment"]["dtype"] == "float32"
        assert len(report["metrics"]) == 5

    def test_jsonl_stream(self, capsys):
        assert main(tiny_verify_args("--jsonl")) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
        assert len(lines) == 5
        assert all(json.loads(l)["passed"] for l in lines)

    def test_threads_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QUOKA_THREADS", "1")
        out = tmp_path / "report.json"
        assert main(tiny_verify_args("--out", str(out))) == 0
        assert json.loads(out.read_text())["environment"]["threads"] == 1

    def test_threads_env_invalid(self, monkeypatch):
        monkeypatch.setenv("QUOKA_THREADS", "lots")
        assert main(tiny_verify_args()) == 2


class TestAblateCommand:
    def test_csv_schema_golden(self, tmp_path, capsys):
        out = tmp_path / "ablation.csv"
        assert main(tiny_ablate_args(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == f"# schema: {METRICS_SCHEMA}"
        assert lines[1] == "selector,T,B_CP,B_SA,N_Q,seed,output_l2_error,kv_recall,needle_recall,time_ms"
        assert len(lines) == 2 + 4 * 2     # four arms x two seeds

    def test_metrics_deterministic_outside_timings(self, tmp_path, capsys):
        def strip_time(path):
            lines = path.read_text().splitlines()
            return [",".join(line.split(",")[:-1]) for line in lines]

        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(tiny_ablate_args(out1)) == 0
        assert main(tiny_ablate_args(out2)) == 0
        assert strip_time(out1) == strip_time(out2)
        r1 = json.loads((tmp_path / "a.report.json").read_text())
        r2 = json.loads((tmp_path / "b.report.json").read_text())
        assert json.dumps(r1["metrics"], sort_keys=True) == json.dumps(r2["metrics"], sort_keys=True)

    def test_empty_grid_exits_2(self, tmp_path):
        out = tmp_path / "a.csv"
        assert main(tiny_ablate_args(out, "--set", "ablate.arms=[]")) == 2

    def test_jsonl_drops_timing(self, tmp_path, capsys):
        out = tmp_path / "a.csv"
        assert main(tiny_ablate_args(out, "--jsonl")) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
        assert lines and all("time_ms" not in json.loads(l) for l in lines)

    def test_seed_flag_changes_rows(self, tmp_path):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(tiny_ablate_args(out1)) == 0
        assert main(tiny_ablate_args(out2, "--seed", "123")) == 0
        assert out1.read_text().splitlines()[2] != out2.read_text().splitlines()[2]


def bench_args(out, *extra):
    return ["bench", "--out", str(out),
            "--set", "bench.T_list=[64,128,256,512]",
            "--set", "bench.B_CP=16", "--set", "bench.B_SA=32", "--set", "bench.N_Q=4",
            "--set", 'bench.layout={"n_q":2,"n_kv":1,"d":8}',
            *extra]


class TestBenchCommand:
    def test_csv_schema_and_summary(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(bench_args(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == f"# schema: {BENCH_SCHEMA}"
        assert lines[1] == "selector,mode,T,B_CP,B_SA,N_Q,repeats,median_s"
        assert len(lines) == 2 + 2 * 2 * 4
        stdout = capsys.readouterr().out
        assert "slope dense/full_prefill" in stdout
        assert "speedup of quoka over dense" in stdout

    def test_resolution_failure_exits_3(self, tmp_path, monkeypatch, capsys):
        fake = type(time.get_clock_info("perf_counter"))(
            implementation="fake", monotonic=True, adjustable=False, resolution=10.0)
        monkeypatch.setattr(time, "get_clock_info", lambda name: fake)
        assert main(bench_args(tmp_path / "bench.csv")) == 3

    def test_reproducible_medians_within_twenty_percent(self, tmp_path, capsys):
        # stability contract on the full-prefill medians at the largest probed
        # size; sizes chosen so the measured times are tens of milliseconds
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["bench", "--threads", "1",
                "--set", "bench.T_list=[512,1024,2048,4096]",
                "--set", "bench.B_CP=32", "--set", "bench.B_SA=128",
                "--set", "bench.N_Q=8", "--set", 'bench.layout={"n_q":2,"n_kv":1,"d":16}',
                "--set", "bench.repeats=7"]
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0

        def largest_full_prefill(path):
            rows = [l.split(",") for l in path.read_text().splitlines()[2:]]
            return {r[0]: float(r[7]) for r in rows if r[2] == "4096" and r[1] == "full_prefill"}

        m1, m2 = largest_full_prefill(out1), largest_full_prefill(out2)
        for key in m1:
            ratio = m1[key] / m2[key]
            assert 1 / 1.2 <= ratio <= 1.2, (key, m1[key], m2[key])


def test_config_file_plus_override(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"verify": {"instances": 3, "oracle_instances": 3,
                                               "theorem_trials": 100, "linearity_draws": 5}}))
    assert main(["verify", "--config", str(cfg_path), "--set", "seed=7"]) == 0
