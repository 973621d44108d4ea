import json

import numpy as np
import pytest

from kvcompress import load_dump, save_dump
from kvcompress.cli import main

from conftest import random_cache


def write_config(path, **overrides):
    cfg = {
        "generator": {
            "L": 1, "H": 2, "seq_len": 48, "dim": 8,
            "n_clusters": 4, "spread": 0.3, "hot_clusters": 1,
            "query_sharpness": 2.0, "window_len": 8,
        },
        "policies": [
            {"base": "snapkv", "mix": False},
            {"base": "snapkv", "mix": True},
        ],
        "budgets": [16, 24],
        "seeds": [0, 1],
        "eval_queries": 4,
        "eval_query_seed": 7,
        "workers": 1,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture
def config_path(tmp_path):
    return write_config(tmp_path / "exp.json")


def run(args):
    return main([str(a) for a in args])


class TestGenerate:
    def test_one_dump_per_seed_with_seed_manifest(self, tmp_path, config_path):
        out = tmp_path / "dumps"
        assert run(["generate", "--config", config_path, "--out", out]) == 0
        files = sorted(out.glob("*.kvd"))
        assert len(files) == 2
        seeds = {load_dump(f).manifest["seed"] for f in files}
        assert seeds == {0, 1}

    def test_rerun_byte_identical(self, tmp_path, config_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run(["generate", "--config", config_path, "--out", out1])
        run(["generate", "--config", config_path, "--out", out2])
        for f1, f2 in zip(sorted(out1.iterdir()), sorted(out2.iterdir())):
            assert f1.read_bytes() == f2.read_bytes()

    def test_empty_seeds_is_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", seeds=[])
        assert run(["generate", "--config", cfg, "--out", tmp_path / "o"]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error:config:")
        assert err.count("\n") == 1

    def test_missing_config_file(self, tmp_path):
        assert run(["generate", "--config", tmp_path / "nope.json"]) == 2


class TestCompress:
    def _dump(self, tmp_path, config_path):
        out = tmp_path / "dumps"
        run(["generate", "--config", config_path, "--out", out])
        return sorted(out.glob("*.kvd"))[0]

    def test_compress_writes_dump_and_report(self, tmp_path, config_path):
        dump = self._dump(tmp_path, config_path)
        comp = tmp_path / "c.kvz"
        report = tmp_path / "report.tsv"
        code = run(["compress", "--dump", dump, "--base", "snapkv", "--mix",
                    "--budget", 16, "--out", comp, "--report", report])
        assert code == 0
        lines = report.read_text().strip().splitlines()
        assert len(lines) == 2 + 2  # policy echo + header + one row per head
        for line in lines[2:]:
            r_bar = float(line.split("\t")[2])
            assert 0.0 <= r_bar <= 1.0

    def test_knorm_needs_no_windows(self, tmp_path, rng):
        cache = random_cache(rng, seq_len=24, window_len=4)
        dump = tmp_path / "plain.kvd"
        save_dump(cache, None, dump)
        assert run(["compress", "--dump", dump, "--base", "knorm",
                    "--budget", 8, "--out", tmp_path / "c.kvz"]) == 0

    def test_snapkv_without_windows_is_data_error(self, tmp_path, rng, capsys):
        cache = random_cache(rng, seq_len=24, window_len=4)
        dump = tmp_path / "plain.kvd"
        save_dump(cache, None, dump)
        assert run(["compress", "--dump", dump, "--base", "snapkv",
                    "--budget", 8, "--out", tmp_path / "c.kvz"]) == 3
        assert capsys.readouterr().err.startswith("error:data:")

    def test_missing_dump_is_data_error(self, tmp_path):
        assert run(["compress", "--dump", tmp_path / "nope.kvd", "--base", "knorm",
                    "--budget", 8, "--out", tmp_path / "c.kvz"]) == 3


class TestEval:
    def _pair(self, tmp_path, config_path, budget=16):
        dumps = tmp_path / "dumps"
        run(["generate", "--config", config_path, "--out", dumps])
        dump = sorted(dumps.glob("*.kvd"))[0]
        comp = tmp_path / "c.kvz"
        run(["compress", "--dump", dump, "--base", "snapkv", "--budget", budget,
             "--out", comp])
        return dump, comp

    def test_identity_compression_rows_zero(self, tmp_path, config_path):
        dump, comp = self._pair(tmp_path, config_path, budget=48)
        out = tmp_path / "rows.tsv"
        assert run(["eval", "--original", dump, "--compressed", comp,
                    "--query-seed", 3, "--queries", 4, "--out", out]) == 0
        lines = out.read_text().strip().splitlines()
        data = [l for l in lines if not l.startswith(("policy", "#"))]
        assert len(data) == 2
        for line in data:
            cols = line.split("\t")
            assert float(cols[7]) == 0.0   # fidelity_l2
            assert float(cols[9]) == 0.0   # coverage_gap
            assert float(cols[10]) == 1.0  # memory_ratio

    def test_eval_idempotent_per_run(self, tmp_path, config_path):
        dump, comp = self._pair(tmp_path, config_path)
        out = tmp_path / "rows.tsv"
        run(["eval", "--original", dump, "--compressed", comp, "--out", out])
        first = out.read_text()
        run(["eval", "--original", dump, "--compressed", comp, "--out", out])
        assert out.read_text() == first

    def test_lineage_mismatch_refused(self, tmp_path, config_path, capsys):
        dumps = tmp_path / "dumps"
        run(["generate", "--config", config_path, "--out", dumps])
        d0, d1 = sorted(dumps.glob("*.kvd"))
        comp = tmp_path / "c.kvz"
        run(["compress", "--dump", d0, "--base", "snapkv", "--budget", 16, "--out", comp])
        assert run(["eval", "--original", d1, "--compressed", comp,
                    "--out", tmp_path / "rows.tsv"]) == 3
        assert "lineage" in capsys.readouterr().err


class TestCompare:
    def test_grid_tables_and_determinism(self, tmp_path, config_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run(["compare", "--config", config_path, "--out", out1, "--workers", 1]) == 0
        assert run(["compare", "--config", config_path, "--out", out2, "--workers", 8]) == 0
        assert (out1 / "results.tsv").read_bytes() == (out2 / "results.tsv").read_bytes()
        assert (out1 / "summary.tsv").read_bytes() == (out2 / "summary.tsv").read_bytes()

        rows = (out1 / "results.tsv").read_text().strip().splitlines()
        # header + policies(2) x budgets(2) x seeds(2) x heads(2)
        assert len(rows) == 1 + 2 * 2 * 2 * 2
        header = rows[0].split("\t")
        assert header == ["policy", "mix", "budget", "seed", "layer", "head",
                          "r_bar", "fidelity_l2", "fidelity_cos", "coverage_gap",
                          "memory_ratio"]
        summary = (out1 / "summary.tsv").read_text()
        assert "coverage_win_rate" in summary

    def test_empty_policies_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "bad.json", policies=[])
        assert run(["compare", "--config", cfg, "--out", tmp_path / "o"]) == 2


class TestRedundancyReport:
    def test_extremes(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json",
            generator={"L": 1, "H": 2, "seq_len": 32, "dim": 8, "n_clusters": 1,
                       "spread": 0.0, "window_len": 4},
            seeds=[5],
        )
        dumps = tmp_path / "dumps"
        run(["generate", "--config", cfg, "--out", dumps])
        dump = next(iter(dumps.glob("*.kvd")))
        out = tmp_path / "red.tsv"
        assert run(["redundancy-report", "--dump", dump, "--out", out]) == 0
        rows = out.read_text().strip().splitlines()[1:]
        assert len(rows) == 2
        for row in rows:
            assert float(row.split("\t")[2]) == pytest.approx(1.0, abs=1e-6)

    def test_orthonormal_zero(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json",
            generator={"L": 1, "H": 1, "seq_len": 8, "dim": 16, "n_clusters": 8,
                       "spread": 0.0, "window_len": 2, "orthonormal_centers": True},
            seeds=[2],
        )
        dumps = tmp_path / "dumps"
        run(["generate", "--config", cfg, "--out", dumps])
        dump = next(iter(dumps.glob("*.kvd")))
        out = tmp_path / "red.tsv"
        run(["redundancy-report", "--dump", dump, "--out", out, "--naive"])
        value = float(out.read_text().strip().splitlines()[1].split("\t")[2])
        assert value == pytest.approx(0.0, abs=1e-6)


class TestGroupedQueries:
    def test_gqa_dump_compress_eval_chain(self, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.json",
            generator={"L": 1, "H": 2, "seq_len": 48, "dim": 8, "n_clusters": 4,
                       "spread": 0.3, "window_len": 8, "group_size": 2},
            seeds=[4],
        )
        dumps = tmp_path / "dumps"
        run(["generate", "--config", cfg, "--out", dumps])
        dump = next(iter(dumps.glob("*.kvd")))
        assert load_dump(dump).manifest["W_eff"] == 16
        comp = tmp_path / "c.kvz"
        assert run(["compress", "--dump", dump, "--base", "snapkv", "--mix",
                    "--budget", 16, "--out", comp]) == 0
        assert run(["eval", "--original", dump, "--compressed", comp,
                    "--out", tmp_path / "rows.tsv"]) == 0


class TestErrorMapping:
    def test_internal_errors_exit_4(self, tmp_path, config_path, capsys, monkeypatch):
        import kvcompress.cli as cli
        monkeypatch.setattr(cli, "cmd_generate",
                            lambda *a, **k: (_ for _ in ()).throw(RuntimeError("boom")))
        assert run(["generate", "--config", config_path, "--out", tmp_path / "o"]) == 4
        err = capsys.readouterr().err
        assert err.startswith("error:internal:")
        assert err.count("\n") == 1


class TestBench:
    def test_writes_stage_rows(self, tmp_path, config_path):
        dumps = tmp_path / "dumps"
        run(["generate", "--config", config_path, "--out", dumps])
        dump = sorted(dumps.glob("*.kvd"))[0]
        out = tmp_path / "timings.tsv"
        assert run(["bench", "--dump", dump, "--base", "snapkv", "--budget", 16,
                    "--repetitions", 3, "--out", out]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].split("\t")[:5] == ["policy", "mix", "budget", "seed", "stage"]
        assert len([l for l in lines if not l.startswith("#")]) == 1 + 8  # header + 2x4 stages
        assert any(l.startswith("# mixing_overhead_ratio") for l in lines)
