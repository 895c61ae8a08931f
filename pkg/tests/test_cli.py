"""
Tests for the command-line surface: exit codes, outputs and environment overrides
"""

import numpy as np
import pandas as pd
import pytest

from ballsparse.cli import rf as rf_command
from ballsparse.cli.bench import fit_slopes, time_layer
from ballsparse.cli.check import check_flop_ordering, check_structure, check_topk, shares_group_selection
from ballsparse.cli.requests import BenchRequest, CheckRequest, FlopsRequest
from ballsparse.config import ACCEPTANCE_CONFIG
from ballsparse.main import build_parser, build_request, main
from ballsparse.processing.attention.branches import SelectionPlan
from ballsparse.processing.utils.table_utils import environment_metadata, parse_key_values


def _error_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


class TestFlops:

    def test_key_value_report(self, capsys):
        assert main(["flops", "--n", "4096"]) == 0
        report = parse_key_values(capsys.readouterr().out)
        assert report["n_points"] == "4096"
        assert report["variant"] == "bsa"
        assert int(report["total"]) == int(report["attention_total"]) + int(report["flops_mlp"])

    def test_csv_covers_every_variant(self, tmp_path):
        out = tmp_path / "flops.csv"
        assert main(["flops", "--n", "1024", "--format", "csv", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert table["variant"].tolist() == ["full", "bsa", "bsa-nogroup", "bsa-gc"]
        assert (table["n"] == 1024).all()

    def test_environment_overrides_defaults(self, capsys, monkeypatch):
        monkeypatch.setenv("BSA_N", "2048")
        assert main(["flops"]) == 0
        assert parse_key_values(capsys.readouterr().out)["n_points"] == "2048"

    def test_flag_beats_environment(self, capsys, monkeypatch):
        monkeypatch.setenv("BSA_N", "2048")
        assert main(["flops", "--n", "512"]) == 0
        assert parse_key_values(capsys.readouterr().out)["n_points"] == "512"


class TestExitCodes:

    def test_invalid_config(self, capsys):
        assert main(["flops", "--ball-size", "10", "--block-len", "4"]) == 3
        assert _error_line(capsys).startswith('error=invalid_config detail="')

    def test_invalid_thread_count(self, capsys):
        assert main(["flops", "--threads", "0"]) == 3

    def test_missing_points_file(self, capsys, tmp_path):
        assert main(["rf", "--points-file", str(tmp_path / "absent.txt")]) == 4
        assert _error_line(capsys).startswith("error=missing_input")

    def test_non_finite_points(self, capsys, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0\nnan 1 2\n1 1 1\n")
        assert main(["rf", "--points-file", str(path)]) == 5
        assert _error_line(capsys).startswith("error=rejected_input")

    def test_token_out_of_range(self, capsys):
        assert main(["rf", "--n-points", "64", "--token", "64"]) == 3
        assert _error_line(capsys).startswith("error=invalid_config")

    def test_token_checked_before_layout(self, capsys, tmp_path, monkeypatch):
        path = tmp_path / "three.txt"
        path.write_text("0 0 0\n1 0 0\n0 1 0\n")

        def no_layout(*args, **kwargs):
            raise AssertionError("layout built for an invalid token")

        monkeypatch.setattr(rf_command, "prepare_layout", no_layout)
        assert main(["rf", "--points-file", str(path), "--token", "5"]) == 3
        assert "out of range" in _error_line(capsys)

    def test_unset_flags_keep_model_defaults(self):
        args = build_parser().parse_args(["flops", "--n", "64"])
        request = build_request(args)
        assert isinstance(request, FlopsRequest)
        assert request.n == 64
        assert request.depth == FlopsRequest().depth


class TestReceptiveFieldCommand:

    def test_ball_only(self, tmp_path):
        out = tmp_path / "rf.csv"
        assert main(["rf", "--n-points", "256", "--branches", "ball", "--token", "3", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert list(table.columns) == ["token", "in_ball", "in_selection", "in_compression"]
        assert len(table) == 256
        assert table["in_ball"].sum() == 64
        assert table.loc[3, "in_ball"] == 1
        assert table["in_selection"].sum() == 0

    def test_compression_reaches_everything(self, tmp_path):
        out = tmp_path / "rf.csv"
        assert main(["rf", "--n-points", "256", "--branches", "cmp", "--out", str(out)]) == 0
        assert (pd.read_csv(out)["in_compression"] == 1).all()

    def test_default_branches(self, tmp_path):
        out = tmp_path / "rf.csv"
        assert main(["rf", "--n-points", "256", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert table["in_selection"].sum() == 4 * 8
        assert not (table["in_ball"] & table["in_selection"]).any()


class TestCheckCommand:

    def test_topk_check(self):
        assert check_topk(CheckRequest()).passed

    def test_corrupted_tie_rule_is_caught(self):
        result = check_topk(CheckRequest(corrupt_tie_rule=True))
        assert not result.passed
        assert result.detail != "mismatches=0"

    def test_structure_and_ordering_checks(self):
        result = check_structure(CheckRequest())
        assert result.passed, result.detail
        assert check_flop_ordering(CheckRequest()).passed

    def test_group_selection_sharing(self):
        shared = SelectionPlan(indices=np.array([[0, 1], [2, 3]]), group_size=4, block_len=2)
        assert shares_group_selection(shared, 4, 8)
        per_token = SelectionPlan(indices=np.array([[0, 1]] * 3 + [[2, 3]] * 5), group_size=1, block_len=2)
        assert not shares_group_selection(per_token, 4, 8)
        uniform = SelectionPlan(indices=np.array([[0, 1]] * 8), group_size=1, block_len=2)
        assert shares_group_selection(uniform, 4, 8)
        assert not shares_group_selection(shared, 4, 12)

    @pytest.mark.slow
    def test_full_suite(self, tmp_path):
        out = tmp_path / "check.txt"
        assert main(["check", "--out", str(out)]) == 0
        assert parse_key_values(out.read_text())["result"] == "pass"

    @pytest.mark.slow
    def test_corrupted_suite_fails(self, capsys):
        assert main(["check", "--corrupt-tie-rule"]) == 1
        assert parse_key_values(capsys.readouterr().out)["topk_bruteforce"] == "fail"


class TestBenchCommand:

    def test_small_sweep(self, tmp_path):
        out = tmp_path / "bench.csv"
        argv = [
            "bench", "--min-n", "64", "--max-n", "128", "--ball-size", "32",
            "--variants", "full,bsa", "--repeats", "1", "--warmups", "0", "--out", str(out),
        ]
        assert main(argv) == 0
        table = pd.read_csv(out)
        assert list(table.columns[:4]) == ["n", "variant", "ms_median", "flops"]
        assert sorted(zip(table["n"], table["variant"])) == [(64, "bsa"), (64, "full"), (128, "bsa"), (128, "full")]
        assert (table["ms_median"] > 0).all()
        assert pd.api.types.is_integer_dtype(table["threads"])
        assert (table["threads"] >= 1).all()

        slopes = parse_key_values((tmp_path / "bench_slopes.txt").read_text())
        assert slopes["n_max"] == "128"
        assert np.isfinite(float(slopes["slope.full"]))
        assert "speedup.bsa" in slopes

    def test_thread_count_is_reported(self):
        assert environment_metadata(3, "working")["threads"] == 3
        unlimited = environment_metadata(None, "working")["threads"]
        assert isinstance(unlimited, int) and unlimited >= 1

    def test_infeasible_sweep(self, capsys):
        argv = ["bench", "--min-n", "64", "--max-n", "64", "--variants", "bsa", "--repeats", "1"]
        assert main(argv) == 3

    def test_inverted_range(self, capsys):
        assert main(["bench", "--min-n", "512", "--max-n", "256"]) == 3

    @pytest.mark.slow
    def test_runtime_scaling(self):
        request = BenchRequest()
        rng = np.random.default_rng(0)
        rows = [
            {"n": n, "variant": variant, "ms_median": time_layer(n, request.variant_config(variant), rng, np.float32, 3, 1)}
            for n in ACCEPTANCE_CONFIG["slope_sizes"]
            for variant in ("full", "bsa-gc")
        ]
        slopes = fit_slopes(rows)
        assert slopes["full"] >= ACCEPTANCE_CONFIG["min_full_slope"]
        assert slopes["bsa-gc"] < slopes["full"]


class TestTrainCommands:

    def test_train_without_steps(self, tmp_path):
        out = tmp_path / "train.csv"
        assert main(["train", "--steps", "0", "--n-points", "128", "--depth", "1", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert table["step"].tolist() == [0]
        assert (tmp_path / "train_checkpoint.bin").exists()
        assert (tmp_path / "train_checkpoint.manifest").exists()

    @pytest.mark.slow
    def test_ablation_grid(self, tmp_path):
        out = tmp_path / "ablate.csv"
        argv = ["ablate", "--n-points", "128", "--top-k", "2", "--steps", "1", "--depth", "1", "--out", str(out)]
        assert main(argv) == 0
        table = pd.read_csv(out)
        assert len(table) == 8
        assert (table["block_len"] == table["group_size"]).sum() == 4
        assert np.isfinite(table["final_test_mse"]).all()
