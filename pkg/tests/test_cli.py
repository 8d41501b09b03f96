import argparse
import json
import re

import numpy as np
import pytest

from nsbench.cli import EXIT_DIGEST, EXIT_RUNTIME, EXIT_USAGE, build_parser, generate_settings, main
from nsbench.grid import read_manifest
from nsbench.models import DESK_SPECS, build
from nsbench.nn import save_archive


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--size", "16", "--n", "3", "--quiet"]
    assert main(["generate", "--ranges", "10,20,30", "--seed", "1", "--out", str(root / "train")] + common) == 0
    assert main(["generate", "--ranges", "15,25", "--seed", "2", "--out", str(root / "test")] + common) == 0
    assert main(["train", "--family", "swin", "--profile", "desk", "--data", str(root / "train"), "--epochs", "2",
                 "--batch", "4", "--augment-to", "14", "--quiet", "--out", str(root / "ckpt")]) == 0
    return root


class TestParser:
    def test_generate_full_profile_defaults(self):
        args = build_parser().parse_args(["generate", "--out", "x"])
        grid, ranges, props, n = generate_settings(args)
        assert (grid.nx, grid.ny, grid.cell_size) == (224, 224, 5.0)
        assert ranges[0] == 40.0 and ranges[-1] == 400.0 and len(ranges) == 10
        assert props == [] and n == 50

    def test_generate_desk_profile(self):
        args = build_parser().parse_args(["generate", "--profile", "desk", "--n-ranges", "60", "--out", "x"])
        grid, ranges, _, n = generate_settings(args)
        assert grid.nx == 64 and n == 10 and len(ranges) == 60
        assert ranges[0] == pytest.approx(40 * 64 / 224) and ranges[-1] == pytest.approx(400 * 64 / 224)

    def test_type2_default_proportions(self):
        args = build_parser().parse_args(["generate", "--kind", "type2", "--out", "x"])
        assert generate_settings(args)[2] == [round(0.1 * i, 1) for i in range(10)]

    def test_every_flag_documented(self):
        parser = build_parser()
        subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        assert set(subs.choices) == {"generate", "train", "benchmark", "inspect", "import-weights", "reproduce"}
        for name, sub in subs.choices.items():
            for action in sub._actions:
                if isinstance(action, argparse._HelpAction):
                    continue
                assert action.help, f"{name} {action.option_strings or action.dest} lacks help"

    def test_units_in_help(self):
        parser = build_parser()
        subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        text = subs.choices["generate"].format_help()
        for unit in ("metres", "degrees", "cells"):
            assert unit in text


class TestExitCodes:
    def test_help_and_version(self, capsys):
        assert run(capsys, "--help")[0] == 0
        code, out, _ = run(capsys, "--version")
        assert code == 0 and "nsbench" in out

    def test_usage_errors(self, capsys):
        assert run(capsys, "generate", "--bogus", "--out", "x")[0] == EXIT_USAGE
        assert run(capsys, "train", "--family", "cnn")[0] == EXIT_USAGE
        assert run(capsys)[0] == EXIT_USAGE
        assert run(capsys, "generate", "--threads", "0", "--out", "x")[0] == EXIT_USAGE

    def test_runtime_errors(self, capsys, tmp_path):
        code, _, err = run(capsys, "inspect", tmp_path / "missing.nsr")
        assert code == EXIT_RUNTIME and "error" in err
        code, _, err = run(capsys, "benchmark", "--type", "s", "--model", "oracle", "--out", tmp_path / "o")
        assert code == EXIT_RUNTIME and "--data" in err

    def test_existing_output_needs_force(self, capsys, workspace):
        code, _, err = run(capsys, "generate", "--size", "16", "--ranges", "10", "--n", "1",
                           "--out", workspace / "train")
        assert code == EXIT_RUNTIME and "--force" in err


class TestWorkflow:
    def test_generate_writes_run_manifest(self, workspace):
        run_info = json.loads((workspace / "train" / "run.json").read_text())
        assert run_info["command"] == "generate" and run_info["seeds"] == {"base_seed": 1}
        assert len(read_manifest(workspace / "train")) == 9
        assert set(run_info["outputs"]) == {p.name for p in (workspace / "train").iterdir()} - {"run.json"}

    @pytest.mark.parametrize("threads", [1, 2])
    def test_reproduce_generate(self, capsys, workspace, threads):
        code, out, _ = run(capsys, "reproduce", workspace / "train", "--threads", threads)
        assert code == 0 and "byte-for-byte" in out

    def test_reproduce_train(self, capsys, workspace):
        code, out, _ = run(capsys, "reproduce", workspace / "ckpt" / "run.json")
        assert code == 0

    def test_reproduce_detects_tampered_record(self, capsys, workspace, tmp_path):
        info = json.loads((workspace / "train" / "run.json").read_text())
        key = sorted(info["outputs"])[0]
        info["outputs"][key] = "0" * 64
        (tmp_path / "run.json").write_text(json.dumps(info))
        code, _, err = run(capsys, "reproduce", tmp_path / "run.json")
        assert code == EXIT_DIGEST and key in err

    def test_reproduce_detects_changed_input(self, capsys, workspace, tmp_path):
        info = json.loads((workspace / "ckpt" / "run.json").read_text())
        path = sorted(info["inputs"])[0]
        info["inputs"][path] = "f" * 64
        (tmp_path / "run.json").write_text(json.dumps(info))
        assert run(capsys, "reproduce", tmp_path / "run.json")[0] == EXIT_DIGEST

    def test_benchmark_held_out(self, capsys, workspace):
        out = workspace / "bench_s"
        code, text, _ = run(capsys, "benchmark", "--type", "s", "--model", workspace / "ckpt",
                            "--data", workspace / "test", "--out", out)
        assert code == 0 and "mean |relative error|" in text
        assert len((out / "records.csv").read_text().splitlines()) == 7
        assert run(capsys, "reproduce", out)[0] == 0

    def test_benchmark_type2_with_baseline(self, capsys, workspace):
        out = workspace / "bench_2"
        code, _, _ = run(capsys, "benchmark", "--type", "2", "--model", workspace / "ckpt", "--baseline", "oracle",
                         "--ranges", "10,20", "--proportions", "0,0.5", "--n", "2", "--out", out)
        assert code == 0
        assert {"matrix.csv", "matrix_signed.csv", "comparison.csv"} <= {p.name for p in out.iterdir()}
        assert run(capsys, "reproduce", out, "--threads", "2")[0] == 0

    def test_benchmark_type1_oracle(self, capsys, workspace):
        out = workspace / "bench_1"
        code, _, _ = run(capsys, "benchmark", "--type", "1", "--model", "oracle", "--size", "24",
                         "--ranges", "50,60", "--n", "2", "--out", out)
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_records"] == 4

    def test_inspect_recovers_trend(self, capsys, tmp_path):
        assert main(["generate", "--kind", "type2", "--size", "64", "--ranges", "10", "--proportions", "0.8",
                     "--azimuth", "30", "--n", "1", "--quiet", "--out", str(tmp_path / "t2")]) == 0
        item = read_manifest(tmp_path / "t2").items[0]
        code, out, _ = run(capsys, "inspect", tmp_path / "t2" / item["file"])
        assert code == 0
        p = float(re.search(r"trend proportion \(linear regression\)\s+([0-9.]+)", out).group(1))
        assert abs(p - 0.8) < 0.05
        assert "fitted range" in out and "lag_m" in out

    def test_import_weights(self, capsys, workspace, tmp_path):
        donor = build(DESK_SPECS["swin"], seed=7, check=False)
        save_archive(donor.network.state_dict(), tmp_path / "w")
        code, out, _ = run(capsys, "import-weights", "--weights", tmp_path / "w", "--profile", "desk",
                           "--out", tmp_path / "imported")
        assert code == 0 and f"imported {len(donor.network.state_dict())} tensors" in out
        state = donor.network.state_dict()
        name = sorted(state)[0]
        state[name] = np.zeros((1, 1), dtype=np.float32)
        save_archive(state, tmp_path / "bad")
        code, _, err = run(capsys, "import-weights", "--weights", tmp_path / "bad", "--profile", "desk",
                           "--out", tmp_path / "imported2")
        assert code == EXIT_RUNTIME and name in err
