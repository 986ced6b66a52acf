"""Tests for the command line: run configuration, reports and exit codes."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from conetest.cli.commands import NUMERICAL_EXIT, VALIDATION_EXIT, cli
from conetest.cli.run_config import parse_config
from conetest.errors import ConfigurationError


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def case(config_dir):
    def path(n):
        return os.path.join(config_dir, f"orthodont_case{n}.env")

    return path


def write_env(tmp_path, text):
    path = tmp_path / "run.env"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParseConfig:
    def test_orthodont_case(self, case):
        rc = parse_config(case(1))
        assert rc.response == "distance"
        assert rc.categorical == {"Sex": "Male"}
        assert rc.pval == "both"
        assert os.path.exists(rc.data)
        roles, spec1, spec0 = rc.model_specs()
        assert roles.group == "Subject"
        assert spec1.layout.blocks == (2,)
        assert spec0.random_terms == ("1",)

    def test_flags_override_file(self, case):
        rc = parse_config(case(1), overrides={"pval": "bounds", "seed": 7, "M": None})
        assert rc.pval == "bounds"
        assert rc.seed == 7

    def test_unknown_keys_listed(self, tmp_path):
        path = write_env(tmp_path, "m1=a.json\ncolour=red\nshape=round\n")
        with pytest.raises(ConfigurationError, match="colour, shape"):
            parse_config(path, "test-summary")

    def test_invalid_value(self, tmp_path):
        path = write_env(tmp_path, "m1=a.json\nm0=b.json\npval=sometimes\n")
        with pytest.raises(ConfigurationError, match="pval"):
            parse_config(path, "test-summary")

    def test_missing_inputs(self, tmp_path):
        with pytest.raises(ConfigurationError, match="m0"):
            parse_config(None, "test-summary", {"m1": "a.json"})

    def test_block_sizes(self, tmp_path):
        path = write_env(
            tmp_path,
            "data=x.csv\nresponse=y\nfixed=1\nrandom=1 + a + b | id\nblocks=[2,1]\nnull_random=1 + a | id\n",
        )
        _, spec1, spec0 = parse_config(path).model_specs()
        assert spec1.layout.blocks == (2, 1)
        assert spec0.layout.blocks == (2,)

    def test_block_sizes_must_add_up(self, tmp_path):
        path = write_env(
            tmp_path, "data=x.csv\nresponse=y\nfixed=1\nrandom=1 + a | id\nblocks=3\nnull_random=1 | id\n"
        )
        with pytest.raises(ConfigurationError):
            parse_config(path).model_specs()

    def test_fim_path_becomes_file_mode(self, tmp_path):
        fim = tmp_path / "fim.txt"
        fim.write_text("1\n", encoding="utf-8")
        path = write_env(tmp_path, "m1=a.json\nm0=b.json\nfim=fim.txt\nfim_inverse=true\n")
        options = parse_config(path, "test-summary").options()
        assert options.fim_mode == "file"
        assert options.fim_path == str(fim)
        assert options.fim_is_inverse


class TestTestCommand:
    def test_correlated_slope_report(self, runner, case):
        result = runner.invoke(cli, ["test", "--config", case(1)])
        assert result.exit_code == 0, result.stderr
        lines = result.stdout.splitlines()
        assert lines[0] == "Variance components testing in mixed effects models"
        assert lines[1] == "Testing that variance of age is null"
        assert "\tmixture of 2 chi-bar-square distributions with degrees of freedom 1 2" in lines
        assert "\tassociated weights (and sd): 0.5 (0) 0.5 (0)" in lines
        assert any(line.startswith("\tfrom estimated weights: 0.51") for line in lines)
        assert any(line.startswith("\tbounds on p-value: lower  0.51") for line in lines)

    def test_short_report(self, runner, case):
        result = runner.invoke(cli, ["test", "--config", case(2), "--short"])
        assert result.exit_code == 0, result.stderr
        lines = result.stdout.splitlines()
        assert any(line.startswith(" p-value from estimated weights: 0.233") for line in lines)
        assert not any("Limiting distribution" in line for line in lines)

    def test_json_report(self, runner, case):
        result = runner.invoke(cli, ["test", "--config", case(3), "--pval", "bounds", "--format", "json"])
        assert result.exit_code == 0, result.stderr
        payload = json.loads(result.stdout)
        assert payload["dims"]["q"] == 7
        assert payload["pvalues"]["lower_bound"] == pytest.approx(7.18311e-13, rel=1e-2)
        assert payload["lrt"] == pytest.approx(50.13311, abs=1e-2)

    def test_json_identical_across_workers(self, runner, case):
        outputs = []
        for workers in ("1", "4"):
            result = runner.invoke(
                cli,
                ["test", "--config", case(3), "--pval", "both", "--M", "2000", "--seed", "5",
                 "--workers", workers, "--format", "json"],
            )
            assert result.exit_code == 0, result.stderr
            outputs.append(result.stdout_bytes)
        assert outputs[0] == outputs[1]
        assert json.loads(outputs[0])["M"] == 2000

    def test_missing_data_file(self, runner, case, tmp_path):
        result = runner.invoke(cli, ["test", "--config", case(1), "--data", str(tmp_path / "none.csv")])
        assert result.exit_code == VALIDATION_EXIT

    def test_missing_config_file(self, runner, tmp_path):
        result = runner.invoke(cli, ["test", "--config", str(tmp_path / "none.env")])
        assert result.exit_code == VALIDATION_EXIT
        assert "not found" in result.stderr


class TestTestSummaryCommand:
    def test_glmm(self, runner, summary_path):
        result = runner.invoke(
            cli,
            ["test-summary", "--m1", summary_path("cbpp_glmm.json"),
             "--m0", summary_path("cbpp_glmm_h0.json"), "--pval", "both", "--format", "json"],
        )
        assert result.exit_code == 0, result.stderr
        payload = json.loads(result.stdout)
        assert payload["pvalues"]["from_weights"] == pytest.approx(9.114967e-05, rel=1e-5)
        assert payload["weights"]["weights"] == [0.5, 0.5]

    def test_missing_fim_is_validation_error(self, runner, summary_path):
        result = runner.invoke(
            cli,
            ["test-summary", "--m1", summary_path("loblolly_nlmm.json"),
             "--m0", summary_path("loblolly_nlmm_h0.json"), "--pval", "approx"],
        )
        assert result.exit_code == VALIDATION_EXIT

    def test_negative_lrt_is_numerical_error(self, runner, tmp_path):
        m1 = tmp_path / "m1.json"
        m0 = tmp_path / "m0.json"
        m1.write_text(json.dumps({
            "loglik": -20.0,
            "fixed": {"count": 1},
            "blocks": [{"size": 1, "test": "full"}],
        }), encoding="utf-8")
        m0.write_text(json.dumps({"loglik": -10.0}), encoding="utf-8")
        result = runner.invoke(cli, ["test-summary", "--m1", str(m1), "--m0", str(m0)])
        assert result.exit_code == NUMERICAL_EXIT


class TestWeightsCommand:
    def test_exact(self, runner, summary_path):
        result = runner.invoke(cli, ["weights", "--m1", summary_path("cbpp_glmm.json"), "--lrt", "1"])
        assert result.exit_code == 0, result.stderr
        assert "\tassociated weights (and sd): 0.5 (0) 0.5 (0)" in result.stdout
        assert "p-value at LRT = 1: 0.1586553" in result.stdout

    def test_monte_carlo_from_file(self, runner, summary_path, tmp_path):
        fim = tmp_path / "fim.txt"
        np.savetxt(fim, np.eye(7))
        result = runner.invoke(
            cli,
            ["weights", "--m1", summary_path("loblolly_nlmm.json"), "--fim", str(fim),
             "--M", "10000", "--seed", "2", "--format", "json"],
        )
        assert result.exit_code == 0, result.stderr
        payload = json.loads(result.stdout)
        np.testing.assert_allclose(payload["weights"]["weights"], [0.25, 0.5, 0.25], atol=0.03)
        assert payload["dims"]["n_weights"] == 3

    def test_needs_fim(self, runner, summary_path):
        result = runner.invoke(cli, ["weights", "--m1", summary_path("loblolly_nlmm.json")])
        assert result.exit_code == VALIDATION_EXIT


class TestCoverageCommand:
    def test_small_study(self, runner):
        result = runner.invoke(
            cli,
            ["coverage", "--R", "5", "--n", "30", "--timepoints", "8", "--mode", "extract",
             "--format", "json"],
        )
        assert result.exit_code == 0, result.stderr
        payload = json.loads(result.stdout)
        assert payload["modes"] == ["extracted"]
        assert len(payload["coverage"]["extracted"]) == 6
        assert any("coarse" in warning for warning in payload["warnings"])
