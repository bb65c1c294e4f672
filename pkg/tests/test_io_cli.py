import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cpl import io
from cpl.cli import EXIT_INPUT, EXIT_OK, run_command
from cpl.data import ShiftBasis
from cpl.hypothesis import linear, mlp1
from cpl.scores import AbsResidual, Classification
from cpl.solver import PredictionRule
from cpl.synthetic import ToySpec, gen_toy

from conftest import fixture_path


class TestLoadCsv:
    def test_abs_residual_fixture(self):
        ds = io.load_csv(fixture_path("abs_residual_3.csv"), "abs_residual")
        assert ds.n == 3 and ds.p == 2
        np.testing.assert_array_equal(ds.payload[:, 0], [2.0, -1.0, 0.5])
        np.testing.assert_array_equal(np.abs(ds.labels - ds.payload[:, 0]), [1.5, 0.25, 0.5])

    def test_cqr_fixture(self):
        ds = io.load_csv(fixture_path("cqr_3.csv"), "cqr")
        np.testing.assert_array_equal(ds.payload[1], [-1.0, 1.0])

    def test_classification_fixture(self):
        ds = io.load_csv(fixture_path("classification_3.csv"), "classification")
        assert ds.K == 3
        np.testing.assert_array_equal(ds.labels, [1, 0, 2])

    def test_cqr_order_names_line(self):
        with pytest.raises(io.InputError, match=r"\.csv:3: "):
            io.load_csv(fixture_path("cqr_bad_order.csv"), "cqr")

    def test_label_out_of_range(self):
        with pytest.raises(io.InputError, match=r"\.csv:3: "):
            io.load_csv(fixture_path("classification_bad_label.csv"), "classification")

    def test_malformed_value(self):
        with pytest.raises(io.InputError, match=r"\.csv:3: "):
            io.load_csv(fixture_path("abs_residual_malformed.csv"), "abs_residual")

    @pytest.mark.parametrize("name", ["empty.csv", "empty_rows.csv"])
    def test_empty(self, name):
        with pytest.raises(io.InputError):
            io.load_csv(fixture_path(name), "abs_residual")

    def test_schema_mismatch(self):
        with pytest.raises(io.InputError):
            io.load_csv(fixture_path("abs_residual_3.csv"), "cqr")

    def test_missing_file(self, tmp_path):
        path = str(tmp_path / "nope.csv")
        with pytest.raises(io.InputError, match="nope.csv"):
            io.load_csv(path, "abs_residual")

    def test_write_round_trip(self, tmp_path):
        ds = gen_toy(ToySpec(20, 1))
        path = str(tmp_path / "toy.csv")
        io.write_csv_dataset(ds, path)
        back = io.load_csv(path, "abs_residual")
        assert back.X.tobytes() == ds.X.tobytes() and back.labels.tobytes() == ds.labels.tobytes()


class TestBasisSpec:
    def test_file_column(self, tmp_path):
        ds = io.load_csv(fixture_path("abs_residual_3.csv"), "abs_residual")
        col = tmp_path / "w.csv"
        col.write_text("weight\n1.5\n-2\n0.25\n")
        basis, wide = io.resolve_basis(f"intercept,file:{col}", ds)
        assert basis.specs == ["intercept", "col:2"]
        np.testing.assert_array_equal(wide.X[:, 2], [1.5, -2.0, 0.25])

    def test_file_column_wrong_length(self, tmp_path):
        ds = io.load_csv(fixture_path("abs_residual_3.csv"), "abs_residual")
        col = tmp_path / "w.csv"
        col.write_text("1\n2\n")
        with pytest.raises(io.InputError):
            io.resolve_basis(f"file:{col}", ds)

    def test_bad_element(self):
        ds = io.load_csv(fixture_path("abs_residual_3.csv"), "abs_residual")
        with pytest.raises(io.InputError):
            io.resolve_basis("intercept,col:9", ds)


def sample_rule():
    hyp = mlp1(2, width=3, bias=0.7, seed=4)
    hyp = hyp.with_params(hyp.params + np.random.default_rng(1).normal(size=hyp.n_params) / 3)
    return PredictionRule(AbsResidual(), hyp, 0.1, ShiftBasis.parse("intercept,eq:0:1"), np.array([1 / 3, 2e-17]),
                          {"seed": 5, "converged": True})


class TestRuleFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rule = sample_rule()
        path = str(tmp_path / "rule.json")
        io.write_rule(rule, path)
        back = io.read_rule(path)
        assert back.hyp.params.tobytes() == rule.hyp.params.tobytes()
        assert back.beta.tobytes() == rule.beta.tobytes()
        assert back.basis.specs == rule.basis.specs
        assert back.provenance == rule.provenance
        assert back.family == rule.family and back.alpha == rule.alpha

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "rule.json"
        io.write_rule(sample_rule(), str(path))
        d = json.loads(path.read_text())
        d["format_version"] = 99
        path.write_text(json.dumps(d))
        with pytest.raises(io.InputError, match="format_version"):
            io.read_rule(str(path))

    def test_corrupt(self, tmp_path):
        path = tmp_path / "rule.json"
        path.write_text("{not json")
        with pytest.raises(io.InputError, match="corrupt"):
            io.read_rule(str(path))

    def test_hand_edited_threshold(self, tmp_path):
        rule = PredictionRule(Classification(3), linear(1, 0.5, [0.0]), 0.1, ShiftBasis.parse("intercept"))
        path = tmp_path / "rule.json"
        io.write_rule(rule, str(path))
        d = json.loads(path.read_text())
        d["hypothesis"]["params"][-1] = 0.123456789012345678
        path.write_text(json.dumps(d))
        back = io.read_rule(str(path))
        assert back.hyp.params[-1] == 0.123456789012345678
        assert back.thresholds(np.zeros((1, 1)))[0] == 0.123456789012345678


class TestFormatting:
    def test_fixed_decimals(self):
        assert io.fmt(0.9) == "0.900000"
        assert io.fmt(float("inf")) == "inf"
        assert io.fmt(7) == "7"
        assert io.fmt(None) == ""


@pytest.fixture
def toy_csv(tmp_path):
    path = str(tmp_path / "cal.csv")
    io.write_csv_dataset(gen_toy(ToySpec(2000, 3)), path)
    return path


CAL_FLAGS = ["--family", "abs_residual", "--basis", "intercept,ge:0:0", "--sigma", "0.05", "--step-h", "0.05",
             "--step-beta", "20", "--max-iters", "300"]


class TestCli:
    def test_missing_data_file(self, tmp_path, capsys):
        missing = str(tmp_path / "absent.csv")
        code = run_command(["calibrate", "--data", missing, "--family", "abs_residual", "--out", str(tmp_path)])
        assert code == EXIT_INPUT
        assert missing in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run_command(["calibrate", "--bogus"]) == EXIT_INPUT
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert run_command(["frobnicate"]) == EXIT_INPUT

    def test_calibrate_then_evaluate(self, tmp_path, toy_csv):
        out = str(tmp_path / "run")
        code = run_command(["calibrate", "--data", toy_csv, "--out", out] + CAL_FLAGS)
        assert code in (0, 3)
        assert os.path.exists(os.path.join(out, "rule.json"))
        diag = json.load(open(os.path.join(out, "diagnostics.json")))
        assert diag["iterations"] >= 1 and len(diag["gap_trace"]) == diag["iterations"]
        assert run_command(["evaluate", "--rule", os.path.join(out, "rule.json"), "--data", toy_csv,
                            "--out", out]) == EXIT_OK
        rows = dict(csv.reader(open(os.path.join(out, "report.csv"))))
        assert rows["quantity"] == "value"
        assert len(rows["marginal_coverage"].split(".")[1]) == 6
        assert abs(float(rows["marginal_coverage"]) - 0.9) < 0.03

    def test_calibrate_is_byte_identical(self, tmp_path, toy_csv):
        outs = [str(tmp_path / f"r{i}") for i in range(2)]
        for out in outs:
            run_command(["calibrate", "--data", toy_csv, "--out", out, "--seed", "3"] + CAL_FLAGS)
        blobs = [open(os.path.join(o, "rule.json"), "rb").read() for o in outs]
        assert blobs[0] == blobs[1]

    def test_file_basis(self, tmp_path, toy_csv):
        col = tmp_path / "neg.csv"
        x = io.load_csv(toy_csv, "abs_residual").X[:, 0]
        col.write_text("\n".join(repr(float(v < 0)) for v in x) + "\n")
        out = str(tmp_path / "run")
        code = run_command(["calibrate", "--data", toy_csv, "--out", out, "--family", "abs_residual",
                            "--basis", f"intercept,file:{col}", "--hypothesis", "linear", "--max-iters", "50"])
        assert code in (0, 3)
        assert io.read_rule(os.path.join(out, "rule.json")).basis.specs == ["intercept", "col:1"]

    def test_bad_config_key(self, tmp_path, toy_csv):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_setting": 1}))
        assert run_command(["calibrate", "--data", toy_csv, "--family", "abs_residual", "--config", str(cfg),
                            "--out", str(tmp_path)]) == EXIT_INPUT

    def test_oracle_toy(self, capsys):
        assert run_command(["oracle", "toy"]) == EXIT_OK
        out = dict(line.split() for line in capsys.readouterr().out.strip().splitlines())
        assert float(out["length"]) == pytest.approx(3.9493767965, abs=1e-9)

    def test_bench_toy_outputs(self, tmp_path):
        out = str(tmp_path / "bench")
        code = run_command(["bench", "toy", "--n", "50000", "--alpha", "0.1", "--seed", "7", "--out", out])
        assert code == EXIT_OK
        for name in ("comparison.csv", "coverage.svg", "length.svg"):
            assert os.path.getsize(os.path.join(out, name)) > 0
        rows = list(csv.DictReader(open(os.path.join(out, "comparison.csv"))))
        assert [r["method"] for r in rows][:2] == ["cpl", "split_conformal"]
        assert {"marginal_coverage", "avg_length", "length_ratio_vs_split_conformal"} <= set(rows[0])
        assert open(os.path.join(out, "coverage.svg")).read().startswith("<svg")

    def test_bench_rerun_byte_identical(self, tmp_path):
        outs = [str(tmp_path / f"b{i}") for i in range(2)]
        for out in outs:
            run_command(["bench", "toy", "--n", "3000", "--max-iters", "200", "--out", out])
        for name in ("comparison.csv", "coverage.svg", "length.svg"):
            assert open(os.path.join(outs[0], name), "rb").read() == open(os.path.join(outs[1], name), "rb").read()


def test_console_script_module_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "cpl.cli", "oracle", "toy", "--alpha", "0.2"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("q_minus")
