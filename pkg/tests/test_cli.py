"""End-to-end command tests, run in-process against temp directories."""

import csv
import json
import os
import subprocess
import sys

import pytest

from selfonn.cli import EXIT_CONFIG, EXIT_OK, EXIT_QUANT, main


TOY_CONFIG = {
    "network": {
        "input_size": [3, 3],
        "layers": [
            {"neurons": 1, "kernel": [2, 2], "q_order": 3,
             "sampling": {"mode": "up", "factors": [2, 2]}},
            {"neurons": 1, "kernel": [2, 2], "q_order": 3},
        ],
    },
    "training": {"learning_rate": 0.01, "max_iter": 6, "runs": 2, "seed": 1},
    "task": "toy_rotate180",
    "dataset": {"generator": {"count": 8, "seed": 2}},
    "output_dir": "out",
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    monkeypatch.delenv("SELFONN_OUT", raising=False)
    monkeypatch.delenv("SELFONN_THREADS", raising=False)


class TestTrain:
    def test_toy_run_writes_everything(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["train", cfg]) == EXIT_OK
        out_dir = tmp_path / "out"
        fold = out_dir / "fold00"
        assert (fold / "trainlog_run0.csv").is_file()
        assert (fold / "trainlog_run1.csv").is_file()
        assert (fold / "best.json").is_file()
        pgms = list((fold / "outputs").glob("*.pgm"))
        assert len(pgms) == 8
        with open(out_dir / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["fold", "train_mse", "train_snr_db",
                           "eval_mse", "eval_snr_db"]
        assert len(rows) == 2  # toy = one fold
        text = capsys.readouterr().out
        assert "fold 0: best run" in text
        assert "overall: eval mse" in text

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["train", cfg]) == EXIT_OK
        first_summary = (tmp_path / "out" / "summary.csv").read_bytes()
        first_ckpt = (tmp_path / "out" / "fold00" / "best.json").read_bytes()
        first_log = (tmp_path / "out" / "fold00" / "trainlog_run1.csv").read_bytes()
        assert main(["train", cfg]) == EXIT_OK
        assert (tmp_path / "out" / "summary.csv").read_bytes() == first_summary
        assert (tmp_path / "out" / "fold00" / "best.json").read_bytes() == first_ckpt
        assert (tmp_path / "out" / "fold00" /
                "trainlog_run1.csv").read_bytes() == first_log

    def test_seed_flag_changes_result(self, tmp_path):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["train", cfg]) == EXIT_OK
        base = (tmp_path / "out" / "fold00" / "best.json").read_bytes()
        assert main(["train", cfg, "--seed", "99"]) == EXIT_OK
        assert (tmp_path / "out" / "fold00" / "best.json").read_bytes() != base

    def test_env_output_override(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path, TOY_CONFIG)
        redirected = tmp_path / "elsewhere"
        monkeypatch.setenv("SELFONN_OUT", str(redirected))
        assert main(["train", cfg]) == EXIT_OK
        assert (redirected / "summary.csv").is_file()
        assert not (tmp_path / "out").exists()

    def test_missing_manifest_no_side_effects(self, tmp_path, capsys):
        doc = json.loads(json.dumps(TOY_CONFIG))
        doc["dataset"] = {"manifest": "nowhere/manifest.json"}
        cfg = write_config(tmp_path, doc)
        assert main(["train", cfg]) == EXIT_CONFIG
        assert not (tmp_path / "out").exists()
        assert "does not exist" in capsys.readouterr().err

    def test_malformed_json_reports_position(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{"network": }')
        assert main(["train", str(path)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "broken.json:1:" in err

    def test_wrong_generator_key(self, tmp_path, capsys):
        doc = json.loads(json.dumps(TOY_CONFIG))
        doc["dataset"]["generator"]["per_fold"] = 4  # toy takes no per_fold
        cfg = write_config(tmp_path, doc)
        assert main(["train", cfg]) == EXIT_CONFIG
        assert "per_fold" in capsys.readouterr().err

    def test_schema_violation_names_path(self, tmp_path, capsys):
        doc = json.loads(json.dumps(TOY_CONFIG))
        doc["training"]["learning_rate"] = -1
        cfg = write_config(tmp_path, doc)
        assert main(["train", cfg]) == EXIT_CONFIG
        assert "training/learning_rate" in capsys.readouterr().err


class TestEval:
    def test_checkpoint_roundtrip(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["train", cfg]) == EXIT_OK
        ckpt = str(tmp_path / "out" / "fold00" / "best.json")
        capsys.readouterr()
        assert main(["eval", cfg, "--checkpoint", ckpt]) == EXIT_OK
        assert "fold 0: train mse" in capsys.readouterr().out

    def test_mismatched_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["train", cfg]) == EXIT_OK
        ckpt = str(tmp_path / "out" / "fold00" / "best.json")
        other = json.loads(json.dumps(TOY_CONFIG))
        other["network"]["layers"][0]["q_order"] = 5
        cfg2 = write_config(tmp_path, other, name="other.json")
        assert main(["eval", cfg2, "--checkpoint", ckpt]) == EXIT_CONFIG
        assert "does not match" in capsys.readouterr().err


class TestCost:
    def test_minimal_network_two_macs(self, tmp_path, capsys):
        doc = {
            "network": {"input_size": [1, 1],
                        "layers": [{"neurons": 1, "kernel": [1, 1]}]},
            "training": {"learning_rate": 0.01, "max_iter": 1},
            "task": "toy_rotate180",
            "dataset": {"generator": {"count": 1}},
            "output_dir": "out",
        }
        cfg = write_config(tmp_path, doc)
        assert main(["cost", cfg]) == EXIT_OK
        out = capsys.readouterr().out
        assert "total  params 0.002k (2)  macs 0.000M (2)" in out

    def test_layer_table_layout(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["cost", cfg]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["layer", "neurons", "kernel", "q", "out",
                                    "params(k)", "macs(M)"]
        assert len(lines) == 1 + 2 + 1  # header, two layers, total

    def test_mac_ratio_in_q(self, tmp_path, capsys):
        def totals(q):
            doc = json.loads(json.dumps(TOY_CONFIG))
            for layer in doc["network"]["layers"]:
                layer["q_order"] = q
            cfg = write_config(tmp_path, doc, name=f"q{q}.json")
            assert main(["cost", cfg]) == EXIT_OK
            total_line = capsys.readouterr().out.splitlines()[-1]
            return int(total_line.split("(")[2].rstrip(")"))

        m1, m7 = totals(1), totals(7)
        # strip the one bias-accumulate per output pixel: 2x2 + 3x3 = 13
        bias_adds = 13
        assert (m7 - bias_adds) == 7 * (m1 - bias_adds)


class TestGradcheck:
    def test_packaged_config_passes(self, tmp_path, monkeypatch, capsys):
        packaged = os.path.join(os.path.dirname(__file__), os.pardir,
                                "configs", "gradcheck.json")
        monkeypatch.setenv("SELFONN_OUT", str(tmp_path / "gc"))
        assert main(["gradcheck", packaged]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out
        report = tmp_path / "gc" / "gradcheck_report.csv"
        assert report.is_file()
        with open(report, newline="") as fh:
            header = next(csv.reader(fh))
        assert header == ["layer", "i", "k", "r", "t", "q",
                          "analytic", "numeric", "rel_err"]

    def test_first_order_config_passes(self, tmp_path, monkeypatch, capsys):
        doc = json.loads(json.dumps(TOY_CONFIG))
        for layer in doc["network"]["layers"]:
            layer["q_order"] = 1
            layer["operators"] = {"nodal": "mul"}
        cfg = write_config(tmp_path, doc)
        monkeypatch.setenv("SELFONN_OUT", str(tmp_path / "gc"))
        assert main(["gradcheck", cfg]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_injected_error_fails(self, tmp_path, monkeypatch, capsys):
        cfg = write_config(tmp_path, TOY_CONFIG)
        monkeypatch.setenv("SELFONN_OUT", str(tmp_path / "gc"))
        assert main(["gradcheck", cfg, "--inject-error"]) == EXIT_QUANT
        assert "FAIL" in capsys.readouterr().out

    def test_f32_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TOY_CONFIG)
        assert main(["gradcheck", cfg, "--f32"]) == EXIT_CONFIG
        assert "64-bit" in capsys.readouterr().err


class TestCompare:
    def test_identical_configs_identical_columns(self, tmp_path, monkeypatch,
                                                 capsys):
        a = write_config(tmp_path, TOY_CONFIG, name="alpha.json")
        b = write_config(tmp_path, TOY_CONFIG, name="beta.json")
        monkeypatch.setenv("SELFONN_OUT", str(tmp_path / "cmp"))
        assert main(["compare", a, b]) == EXIT_OK
        with open(tmp_path / "cmp" / "compare.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["fold", "model", "best_snr_db"]
        by_model = {}
        for fold, model, value in rows[1:]:
            by_model.setdefault(model, []).append((fold, value))
        assert by_model["alpha"] == by_model["beta"]
        out = capsys.readouterr().out
        assert "model alpha: params 26 macs" in out

    def test_single_config_rejected(self, tmp_path, capsys):
        a = write_config(tmp_path, TOY_CONFIG)
        assert main(["compare", a]) == EXIT_CONFIG
        assert "at least two" in capsys.readouterr().err

    def test_dataset_mismatch_rejected(self, tmp_path, capsys):
        a = write_config(tmp_path, TOY_CONFIG, name="a.json")
        doc = json.loads(json.dumps(TOY_CONFIG))
        doc["dataset"]["generator"]["seed"] = 3
        b = write_config(tmp_path, doc, name="b.json")
        assert main(["compare", a, b]) == EXIT_CONFIG
        assert "different task/dataset" in capsys.readouterr().err


def test_console_script_smoke(tmp_path):
    cfg = write_config(tmp_path, TOY_CONFIG)
    proc = subprocess.run(["selfonn", "cost", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "total  params" in proc.stdout
