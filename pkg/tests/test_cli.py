"""End-to-end command-line behaviour on small runs."""
import csv
import json

import numpy as np
import pytest

from cpdem.checkpoint import load_checkpoint
from cpdem.cli import (EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, eta_tag, main, read_field_csv,
                       sweep_etas)
from cpdem.network import apply_freeze, init_network

SMALL_BAR = """problem = "bar1d_linear"
seed = 0
out = "{out}"
[grid]
counts = [21]
[schedule]
adam_epochs = 30
lbfgs_epochs = 2
lbfgs_iters = 5
n_samples = 4
n_frozen = 4
"""


def write_config(tmp_path, text=SMALL_BAR, name="run.toml", out="out"):
    path = tmp_path / name
    path.write_text(text.format(out=(tmp_path / out).as_posix()))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("bar")
    cfg = write_config(tmp)
    assert main(["pretrain", "--config", str(cfg)]) == EXIT_OK
    return tmp, cfg, tmp / "out" / "checkpoint.json"


class TestHelpers:
    def test_eta_tag(self):
        assert eta_tag([300.0, 0.3]) == "300_0.3"

    def test_sweep_etas_diagonal(self):
        etas = sweep_etas([(0.5, 3.0)], 26)
        assert len(etas) == 26
        assert etas[0, 0] == 0.5 and etas[-1, 0] == 3.0


class TestPretrain:
    def test_outputs(self, trained):
        tmp, _, ckpt_path = trained
        ck = load_checkpoint(ckpt_path)
        assert ck.problem == "bar1d_linear"
        rows = read_rows(tmp / "out" / "train_log.csv")
        assert len(rows) == 32
        assert ck.provenance["final_loss"] == float(rows[-1]["total_loss"])
        assert ck.provenance["pretrain_wall_s"] > 0

    def test_deterministic(self, tmp_path, trained):
        tmp, _, ckpt_path = trained
        cfg = write_config(tmp_path)
        assert main(["pretrain", "--config", str(cfg)]) == EXIT_OK
        a = [r["total_loss"] for r in read_rows(tmp / "out" / "train_log.csv")]
        b = [r["total_loss"] for r in read_rows(tmp_path / "out" / "train_log.csv")]
        assert a == b
        np.testing.assert_array_equal(load_checkpoint(ckpt_path).params.flat,
                                      load_checkpoint(tmp_path / "out" / "checkpoint.json").params.flat)

    def test_bad_config_writes_nothing(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SMALL_BAR.replace("n_samples = 4", "n_samples = 0"))
        assert main(["pretrain", "--config", str(cfg)]) == EXIT_CONFIG
        assert "schedule.n_samples" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_missing_config(self, tmp_path):
        assert main(["pretrain", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG

    def test_unknown_command(self):
        assert main(["explode"]) == EXIT_CONFIG


class TestInfer:
    def test_field_csv(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["infer", "--checkpoint", str(ckpt), "--eta", "1.5", "--eta", "2",
                     "--out", str(tmp_path)]) == EXIT_OK
        X, u = read_field_csv(tmp_path / "field_1.5.csv")
        assert X.shape == (21, 1) and u.shape == (21, 1)
        assert u[0, 0] == 0.0
        assert (tmp_path / "field_2.csv").exists()

    def test_grid_override(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["infer", "--checkpoint", str(ckpt), "--eta", "1.5", "--grid", "7",
                     "--out", str(tmp_path)]) == EXIT_OK
        X, _ = read_field_csv(tmp_path / "field_1.5.csv")
        assert len(X) == 7

    def test_out_of_distribution_warning(self, trained, tmp_path, capsys):
        _, _, ckpt = trained
        assert main(["infer", "--checkpoint", str(ckpt), "--eta", "3.3",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert "out-of-distribution" in capsys.readouterr().err

    def test_invalid_eta(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["infer", "--checkpoint", str(ckpt), "--eta", "-1",
                     "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["infer", "--checkpoint", str(ckpt), "--eta", "1,2",
                     "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_architecture_mismatch_exit(self, trained, tmp_path):
        _, _, ckpt = trained
        other = write_config(tmp_path, SMALL_BAR + '[network]\nactivation = "relu"\n')
        assert main(["infer", "--config", str(other), "--checkpoint", str(ckpt), "--eta", "1.0",
                     "--out", str(tmp_path)]) == EXIT_CHECKPOINT

    def test_corrupt_checkpoint_exit(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "cpdem-checkpoint", "format_ver')
        assert main(["infer", "--checkpoint", str(bad), "--eta", "1.0"]) == EXIT_CHECKPOINT


class TestFinetune:
    def test_zero_steps_is_identity(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["finetune", "--checkpoint", str(ckpt), "--eta", "2.0", "--steps", "0",
                     "--out", str(tmp_path)]) == EXIT_OK
        a, b = load_checkpoint(ckpt), load_checkpoint(tmp_path / "finetuned.json")
        np.testing.assert_array_equal(a.params.flat, b.params.flat)
        row = read_rows(tmp_path / "finetune_report.csv")[0]
        assert row["zero_shot_error"] == row["finetuned_error"]

    def test_encoders_frozen(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["finetune", "--checkpoint", str(ckpt), "--eta", "2.0", "--steps", "5",
                     "--out", str(tmp_path)]) == EXIT_OK
        a, b = load_checkpoint(ckpt), load_checkpoint(tmp_path / "finetuned.json")
        mask = apply_freeze(a.params, "freeze_encoders").freeze_mask
        np.testing.assert_array_equal(a.params.flat[mask], b.params.flat[mask])
        row = read_rows(tmp_path / "finetune_report.csv")[0]
        assert float(row["finetuned_error"]) <= float(row["zero_shot_error"])

    def test_needs_one_eta(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["finetune", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == EXIT_CONFIG


class TestValidate:
    def test_rows_finite(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["validate", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == EXIT_OK
        rows = read_rows(tmp_path / "validation.csv")
        assert len(rows) == 26
        assert all(np.isfinite(float(r["rel_l2_error"])) and r["status"] == "ok" for r in rows)

    def test_untrained_network_is_caught(self, trained, tmp_path):
        """A fresh initialization must fail the accuracy bar that training passes."""
        _, _, ckpt = trained
        ck = load_checkpoint(ckpt)
        doc = json.loads(ckpt.read_text())
        from cpdem.checkpoint import encode_params
        doc["parameters"] = encode_params(init_network(ck.arch, 99).flat)
        fresh = tmp_path / "fresh.json"
        fresh.write_text(json.dumps(doc))
        assert main(["validate", "--checkpoint", str(fresh), "--out", str(tmp_path)]) == EXIT_OK
        errs = [float(r["rel_l2_error"]) for r in read_rows(tmp_path / "validation.csv")]
        assert max(errs) > 0.5


class TestSweepAndOracle:
    def test_single_query(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["sweep", "--checkpoint", str(ckpt), "--n-queries", "1",
                     "--out", str(tmp_path)]) == EXIT_OK
        timings = read_rows(tmp_path / "sweep_timings.csv")
        assert len(timings) == 1
        assert float(timings[0]["infer_ms"]) > 0 and float(timings[0]["oracle_ms"]) > 0
        assert len(read_rows(tmp_path / "sweep_report.csv")) == 1

    def test_sweep_counts(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["sweep", "--checkpoint", str(ckpt), "--n-queries", "2,5", "--no-oracle",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert len(read_rows(tmp_path / "sweep_timings.csv")) == 7
        fit = read_rows(tmp_path / "sweep_fit.csv")[0]
        assert float(fit["slope_s_per_query"]) > 0

    def test_oracle_command(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["oracle", "--config", str(cfg), "--eta", "1", "--out", str(tmp_path)]) == EXIT_OK
        X, u = read_field_csv(tmp_path / "oracle_1.csv")
        assert u[-1, 0] == pytest.approx(1 / 3, rel=1e-10)

    def test_defaults(self, capsys):
        assert main(["defaults"]) == EXIT_OK
        assert "beam3d_neohookean" in capsys.readouterr().out
