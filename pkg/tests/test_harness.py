import json

import pytest
from click.testing import CliRunner

from gradsync.cli import main
from gradsync.harness import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    compute_efficiency,
    parse_config_file,
    run_compare,
    run_strong_scaling,
    run_weak_scaling,
)


class TestConfigFile:
    def test_parse_flat_key_value(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text(
            "# workload\n"
            "vocab = 128\n"
            "world_sizes = 2, 4, 8  # sweep\n"
            "strategy = dense\n"
            "\n")
        values = parse_config_file(p)
        assert values == {"vocab": "128", "world_sizes": "2, 4, 8",
                          "strategy": "dense"}

    def test_missing_equals_reports_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("vocab = 128\nnonsense line\n")
        with pytest.raises(ConfigError, match=":2"):
            parse_config_file(p)

    def test_duplicate_key_reports_line(self, tmp_path):
        p = tmp_path / "dup.cfg"
        p.write_text("vocab = 1\nvocab = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_file(p)

    def test_build_merges_file_and_overrides(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("vocab = 128\nhidden = 8\nsteps = 2\n")
        cfg = ExperimentConfig.build("weak", parse_config_file(p), vocab=64,
                                     world_sizes="2,4")
        assert cfg.vocab == 64  # override wins
        assert cfg.hidden == 8
        assert cfg.world_sizes == (2, 4)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown config field"):
            ExperimentConfig.build("weak", {"bogus": "1"})


class TestConfigValidation:
    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="strategy"):
            ExperimentConfig(mode="weak", strategy="fastest")

    def test_descending_world_sizes(self):
        with pytest.raises(ConfigError, match="ascending"):
            ExperimentConfig(mode="weak", world_sizes=(8, 4))

    def test_strong_requires_divisible_global_tokens(self):
        with pytest.raises(ConfigError, match="divisible"):
            ExperimentConfig(mode="strong", world_sizes=(3,),
                             global_tokens=100, tokens_per_rank=None)

    def test_strong_pad_policy_accepts_remainder(self):
        cfg = ExperimentConfig(mode="strong", world_sizes=(3,),
                               global_tokens=100, tokens_per_rank=None,
                               remainder_policy="pad")
        assert cfg.remainder_policy == "pad"


class TestComputeEfficiency:
    def test_reference_fixture_91_5_percent(self):
        # base of 8 with 300-node throughput chosen so efficiency is 91.5%
        base = 8
        throughputs = {8: 1.0, 300: 0.915 * (300 / 8)}
        rows = compute_efficiency(throughputs, base)
        top = [r for r in rows if r.world == 300][0]
        assert top.efficiency == pytest.approx(0.915, abs=1e-6)

    def test_base_speedup_exactly_one(self):
        rows = compute_efficiency({2: 5.0, 4: 9.0}, 2)
        assert [r for r in rows if r.world == 2][0].speedup == 1.0

    def test_scale_invariance(self):
        a = compute_efficiency({2: 1.0, 4: 1.8, 8: 3.0}, 2)
        b = compute_efficiency({2: 2.0, 4: 3.6, 8: 6.0}, 2)
        for ra, rb in zip(a, b):
            assert ra.efficiency == pytest.approx(rb.efficiency, rel=1e-12)

    def test_equal_throughputs_strong_efficiency(self):
        rows = compute_efficiency({2: 3.0, 4: 3.0, 8: 3.0}, 2)
        for r in rows:
            assert r.efficiency == pytest.approx(1.0 / (r.world / 2))

    def test_missing_base(self):
        with pytest.raises(ConfigError, match="base"):
            compute_efficiency({4: 1.0}, 2)


def _weak_cfg(**kw):
    defaults = dict(mode="weak", strategy="dense", world_sizes=(2, 4, 8),
                    vocab=64, hidden=8, tokens_per_rank=200, steps=2, seed=5,
                    exec_mode="serial", fusion_threshold=0, plot=False)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def _strong_cfg(**kw):
    defaults = dict(mode="strong", strategy="dense", world_sizes=(1, 2, 4, 8),
                    vocab=64, hidden=8, tokens_per_rank=None,
                    global_tokens=1600, steps=2, seed=5, exec_mode="serial",
                    fusion_threshold=0, plot=False)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestWeakScaling:
    def test_zero_latency_dense_efficiency_near_one(self):
        report = run_weak_scaling(_weak_cfg(latency_us=0.0))
        for row in report.rows:
            assert row.efficiency == pytest.approx(1.0, abs=0.05)

    def test_legacy_efficiency_strictly_decreasing(self):
        report = run_weak_scaling(_weak_cfg(strategy="legacy"))
        effs = [r.efficiency for r in report.rows]
        assert all(b < a for a, b in zip(effs, effs[1:]))

    def test_base_efficiency_exactly_one(self):
        report = run_weak_scaling(_weak_cfg())
        base_row = [r for r in report.rows if r.world == 2][0]
        assert base_row.efficiency == 1.0

    def test_efficiency_within_bounds(self):
        report = run_weak_scaling(_weak_cfg(strategy="both"))
        for row in report.rows:
            assert 0.0 < row.efficiency <= 1.05


class TestStrongScaling:
    def test_base_speedup_one(self):
        report = run_strong_scaling(_strong_cfg())
        assert [r for r in report.rows if r.world == 1][0].speedup == 1.0

    def test_sublinear_concave_speedup_with_latency(self):
        report = run_strong_scaling(_strong_cfg(latency_us=50.0))
        rows = sorted(report.rows, key=lambda r: r.world)
        for row in rows[1:]:
            assert row.speedup < row.world
        gains = [b.speedup / a.speedup
                 for a, b in zip(rows, rows[1:])]  # per-doubling gains shrink
        assert all(later <= earlier + 1e-9
                   for earlier, later in zip(gains, gains[1:]))

    def test_batch_floor_warning(self):
        report = run_strong_scaling(_strong_cfg(batch_floor=400))
        flagged = {r.world: r.below_batch_floor for r in report.rows}
        assert flagged[8] is True  # 1600/8 = 200 < 400
        assert flagged[1] is False

    def test_indivisible_with_pad_and_drop(self):
        for policy, expected_tokens in (("pad", 3 * 534 * 2), ("drop", 3 * 533 * 2)):
            cfg = _strong_cfg(world_sizes=(3,), global_tokens=1601,
                              remainder_policy=policy)
            report = run_strong_scaling(cfg)
            assert report.rows[0].tokens_total == expected_tokens


class TestDeterminism:
    def _outputs(self, tmp_path, tag, exec_mode):
        outdir = tmp_path / tag
        outdir.mkdir()
        cfg = _weak_cfg(
            exec_mode=exec_mode,
            report_out=str(outdir / "report.json"),
            csv_out=str(outdir / "report.csv"),
            trace_out=str(outdir / "trace.json"))
        run_weak_scaling(cfg)
        return {f.name: f.read_bytes() for f in sorted(outdir.iterdir())}

    def test_rerun_bitwise_identical(self, tmp_path):
        a = self._outputs(tmp_path, "a", "threads")
        b = self._outputs(tmp_path, "b", "threads")
        assert a == b

    def test_serial_matches_threads(self, tmp_path):
        a = self._outputs(tmp_path, "t", "threads")
        b = self._outputs(tmp_path, "s", "serial")
        assert a == b


class TestCompareMode:
    def test_same_seed_identical_reports(self, tmp_path):
        texts = []
        for tag in ("x", "y"):
            cfg = ExperimentConfig(
                mode="compare", world_sizes=(8,), vocab=64, hidden=8,
                tokens_per_rank=16, seed=5, exec_mode="serial", plot=False,
                fusion_threshold=0, report_out=str(tmp_path / f"{tag}.json"))
            run_compare(cfg)
            texts.append((tmp_path / f"{tag}.json").read_bytes())
        assert texts[0] == texts[1]

    def test_all_dense_workload_equal_traffic_both_strategies(self):
        cfg = ExperimentConfig(
            mode="compare", world_sizes=(2,), vocab=64, hidden=8,
            tokens_per_rank=16, seed=5, exec_mode="serial", plot=False,
            fusion_threshold=0, tied=False, extra_dense_vars=((8, 8), (4, 4)))
        out = run_compare(cfg)
        # no sparse path is triggered: both strategies reduce the same bytes
        legacy_row, dense_row = out.rows
        assert legacy_row.gather_bytes == 0
        assert legacy_row.reduce_bytes == dense_row.reduce_bytes
        assert legacy_row.virtual_seconds == dense_row.virtual_seconds

    def test_report_json_shape(self, tmp_path):
        cfg = ExperimentConfig(
            mode="compare", world_sizes=(4,), vocab=64, hidden=8,
            tokens_per_rank=16, seed=5, exec_mode="serial", plot=False,
            fusion_threshold=0, report_out=str(tmp_path / "r.json"))
        run_compare(cfg)
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["software_version"]
        assert data["config"]["vocab"] == 64
        row = data["memory_report"]["per_variable"][0]
        assert set(row) == {"variable", "gather_bytes", "reduce_bytes",
                            "byte_ratio", "gather_duration_us",
                            "reduce_duration_us", "duration_ratio"}


class TestCli:
    def _invoke(self, *args):
        return CliRunner().invoke(main, list(args), catch_exceptions=False)

    def test_compare_success_and_outputs(self, tmp_path):
        report = tmp_path / "cmp.json"
        res = self._invoke(
            "compare", "--ranks", "4", "--vocab", "64", "--hidden", "8",
            "--tokens-per-rank", "8", "--exec-mode", "serial",
            "--report-out", str(report), "--csv", "--trace-out",
            str(tmp_path / "trace.json"))
        assert res.exit_code == 0, res.output
        assert report.exists()
        csv_text = (tmp_path / "cmp.csv").read_text().splitlines()
        assert csv_text[0] == CSV_HEADER
        assert (tmp_path / "trace.legacy.json").exists()
        assert (tmp_path / "trace.dense.json").exists()
        assert (tmp_path / "cmp.png").exists()

    def test_weak_with_config_file(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("vocab = 64\nhidden = 8\ntokens_per_rank = 50\n"
                       "world_sizes = 2,4\nsteps = 1\nstrategy = dense\n"
                       "exec_mode = serial\nplot = off\n")
        report = tmp_path / "weak.json"
        res = self._invoke("weak", "--config", str(cfg),
                           "--report-out", str(report))
        assert res.exit_code == 0, res.output
        data = json.loads(report.read_text())
        assert {r["world"] for r in data["rows"]} == {2, 4}

    def test_config_error_exit_code_2(self, tmp_path):
        res = CliRunner().invoke(main, [
            "strong", "--ranks-list", "3", "--global-tokens", "100",
            "--exec-mode", "serial"])
        assert res.exit_code == 2

    def test_bad_config_file_exit_code_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not a key value line\n")
        res = CliRunner().invoke(main, ["weak", "--config", str(cfg)])
        assert res.exit_code == 2

    def test_fusion_threshold_env_honored(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRADSYNC_FUSION_THRESHOLD", "0")
        report = tmp_path / "cmp.json"
        res = self._invoke(
            "compare", "--ranks", "2", "--vocab", "64", "--hidden", "8",
            "--tokens-per-rank", "8", "--exec-mode", "serial",
            "--report-out", str(report))
        assert res.exit_code == 0
        assert json.loads(report.read_text())["config"]["fusion_threshold"] == 0

    def test_strong_scaling_csv_out(self, tmp_path):
        res = self._invoke(
            "strong", "--ranks-list", "1,2,4", "--global-tokens", "400",
            "--vocab", "64", "--hidden", "8", "--strategy", "dense",
            "--exec-mode", "serial", "--no-plot",
            "--csv-out", str(tmp_path / "strong.csv"))
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "strong.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 4
