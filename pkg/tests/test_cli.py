"""Command-line client: output shape, file side effects, exit codes."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from dgattn.cli import main


@pytest.fixture
def runner():
    return CliRunner()


class TestCheck:
    def test_clean_pass(self, runner):
        res = runner.invoke(main, ["check"])
        assert res.exit_code == 0
        assert res.output.count("pass") >= 4
        assert "all suites passed" in res.output

    def test_sabotage_fails_and_names_form(self, runner):
        res = runner.invoke(main, ["check", "--sabotage", "form3"])
        assert res.exit_code == 1
        assert "form3" in res.output
        assert "FAIL" in res.output

    def test_unknown_sabotage_is_usage_error(self, runner):
        res = runner.invoke(main, ["check", "--sabotage", "form9"])
        assert res.exit_code == 2


class TestGradcheck:
    def test_default(self, runner):
        res = runner.invoke(main, ["gradcheck"])
        assert res.exit_code == 0
        assert "gradient check passed" in res.output
        assert "max relative error" in res.output

    def test_custom_shape(self, runner):
        res = runner.invoke(main, ["gradcheck", "-l", "8", "-g", "1",
                                   "-k", "8"])
        assert res.exit_code == 0


class TestComplexity:
    def test_tuple_mode(self, runner):
        res = runner.invoke(main, ["complexity", "-l", "196", "-c", "256",
                                   "-g", "48", "-k", "98"])
        assert res.exit_code == 0
        assert "ratio" in res.output and "0.746" in res.output

    def test_variant_mode_lists_stages(self, runner):
        res = runner.invoke(main, ["complexity", "--variant", "tiny"])
        assert res.exit_code == 0
        for token_count in ("3136", "784", "196", "49"):
            assert token_count in res.output

    def test_variant_json(self, runner):
        res = runner.invoke(main, ["complexity", "--variant", "tiny",
                                   "--json"])
        assert res.exit_code == 0
        body = json.loads(res.output)
        assert len(body["stages"]) == 4

    def test_tuple_json(self, runner):
        res = runner.invoke(main, ["complexity", "-l", "64", "-c", "8",
                                   "-g", "2", "-k", "16", "--json"])
        assert res.exit_code == 0
        body = json.loads(res.output)
        assert body["tokens"] == 64

    def test_missing_arguments(self, runner):
        res = runner.invoke(main, ["complexity", "-l", "64"])
        assert res.exit_code == 2


class TestViz:
    def test_writes_pgm_and_selection(self, runner):
        with runner.isolated_filesystem():
            res = runner.invoke(main, ["viz", "--grid", "8", "--channels",
                                       "6", "-g", "2", "-k", "8"])
            assert res.exit_code == 0
            with open("viz.pgm", "rb") as fh:
                assert fh.read().startswith(b"P5\n8 8\n255\n")
            with open("viz_selection.json") as fh:
                sel = json.load(fh)
            assert np.array(sel["id"]).shape == (2, 8)

    def test_custom_input_file(self, runner):
        with runner.isolated_filesystem():
            tokens = np.zeros((4, 4, 3))
            tokens[:, :2, 0] = 1.0
            tokens[:, 2:, 1] = 1.0
            with open("tok.json", "w") as fh:
                json.dump({"shape": [4, 4, 3],
                           "data": tokens.flatten().tolist()}, fh)
            res = runner.invoke(main, ["viz", "--input", "tok.json",
                                       "--grid", "4", "--channels", "3",
                                       "-g", "2", "-k", "4", "--seed", "2",
                                       "--out", "custom"])
            assert res.exit_code == 0
            with open("custom.pgm", "rb") as fh:
                assert fh.read().startswith(b"P5\n4 4\n")

    def test_missing_input_file(self, runner):
        with runner.isolated_filesystem():
            res = runner.invoke(main, ["viz", "--input", "absent.json"])
            assert res.exit_code == 2


class TestToyTrain:
    def test_writes_csv(self, runner):
        with runner.isolated_filesystem():
            res = runner.invoke(main, ["toy-train", "--steps", "2"])
            assert res.exit_code == 0
            with open("toy_loss.csv") as fh:
                lines = fh.read().strip().splitlines()
            assert lines[0] == "step,loss"
            assert len(lines) == 4
            assert "initial_loss" in res.output


class TestBench:
    def test_json_to_stdout(self, runner):
        res = runner.invoke(main, ["bench", "-l", "32", "-c", "4", "-g", "2",
                                   "-k", "8", "--tiles", "4,8"])
        assert res.exit_code == 0
        rows = json.loads(res.output)
        assert len(rows) == 8

    def test_csv_to_file(self, runner):
        with runner.isolated_filesystem():
            res = runner.invoke(main, ["bench", "-l", "32", "-c", "4",
                                       "-g", "2", "-k", "8", "--tiles", "4",
                                       "--format", "csv", "--out", "b.csv"])
            assert res.exit_code == 0
            with open("b.csv") as fh:
                assert fh.readline().startswith("tile,mode,form")

    def test_bad_tiles(self, runner):
        res = runner.invoke(main, ["bench", "--tiles", "4,x"])
        assert res.exit_code == 2

    def test_counters_stable_across_runs(self, runner):
        args = ["bench", "-l", "24", "-c", "4", "-g", "3", "-k", "6",
                "--tiles", "5", "--mode", "aligned"]
        outs = []
        for _ in range(2):
            res = runner.invoke(main, args)
            assert res.exit_code == 0
            rows = json.loads(res.output)
            outs.append([{k: v for k, v in r.items() if k != "seconds"}
                        for r in rows])
        assert outs[0] == outs[1]


class TestHelp:
    def test_root_help(self, runner):
        res = runner.invoke(main, ["--help"])
        assert res.exit_code == 0
        for sub in ("check", "gradcheck", "complexity", "viz", "toy-train",
                    "bench", "serve"):
            assert sub in res.output
