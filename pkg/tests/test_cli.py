import json

import numpy as np
import pytest

from src.diffusion.approximators import build_mlp_model
from src.main import run
from src.tools.datasets import load_dataset, pooled_variance
from src.utils.checkpoint import Checkpoint, save_checkpoint
from src.utils.formatters import load_matrix
from tests.helpers import binomial_spec

TINY_CONFIG = """\
name = tiny
dataset = swiss_roll
n = 200
holdout = 0
kind = gaussian
T = 5
schedule = fixed
architecture = rbf
rbf_hidden = 4
steps = 3
batch_size = 20
log_every = 1
checkpoint_every = 2
seed = 5
output_dir = {out}
"""


@pytest.fixture
def trained(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY_CONFIG.format(out="run"))
    assert run(["train", "--config", str(config)]) == 0
    return tmp_path / "run"


@pytest.fixture
def roll_data(tmp_path):
    out = tmp_path / "roll.txt"
    assert run(["gen-data", "--kind", "swiss_roll", "--n", "300", "--seed", "3", "--out", str(out)]) == 0
    return out


class TestUsage:
    def test_no_command(self):
        assert run([]) == 2

    def test_missing_required_option(self):
        assert run(["train"]) == 2

    def test_holdout_needs_a_destination(self, tmp_path):
        argv = ["gen-data", "--kind", "heartbeat", "--n", "10", "--out", str(tmp_path / "h.txt"), "--holdout", "3"]
        assert run(argv) == 2


class TestGenData:
    def test_writes_a_standardized_dataset(self, capsys, tmp_path):
        out = tmp_path / "roll.txt"
        assert run(["gen-data", "--kind", "swiss_roll", "--n", "300", "--seed", "3", "--out", str(out)]) == 0
        assert "✅" in capsys.readouterr().out
        data = load_dataset(out)
        assert data.n == 300
        assert abs(pooled_variance(data.values) - 1.0) < 1e-12

    def test_holdout_split(self, tmp_path):
        argv = ["gen-data", "--kind", "heartbeat", "--n", "50", "--seed", "1", "--out", str(tmp_path / "train.txt"),
                "--holdout", "10", "--holdout-out", str(tmp_path / "holdout.txt")]
        assert run(argv) == 0
        assert load_dataset(tmp_path / "train.txt").n == 40
        assert load_dataset(tmp_path / "holdout.txt").n == 10


class TestTrainAndUse:
    def test_training_artifacts(self, trained):
        assert (trained / "final.ckpt").exists()
        assert (trained / "step_2.ckpt").exists()
        assert (trained / "train_log.csv").read_text().count("\n") == 4
        assert not (trained / ".lock").exists()

    def test_sample(self, trained, tmp_path):
        out, frames = tmp_path / "samples.txt", tmp_path / "frames.txt"
        argv = ["sample", "--ckpt", str(trained / "final.ckpt"), "--n", "25", "--out", str(out), "--frames", str(frames)]
        assert run(argv) == 0
        samples, _ = load_matrix(out)
        assert samples.shape == (25, 2)
        assert load_matrix(frames)[0].shape == (6 * 25, 3)

    def test_evaluate(self, trained, roll_data, tmp_path, capsys):
        argv = ["evaluate", "--ckpt", str(trained / "final.ckpt"), "--data", str(roll_data), "--n-traj", "3",
                "--rows", "20", "--out-dir", str(tmp_path / "eval")]
        assert run(argv) == 0
        report = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
        assert report["importance"]["rows"] == 20
        assert "k_minus_null_bits" in report
        assert (tmp_path / "eval" / "evaluation.md").exists()
        assert "JSON report saved" in capsys.readouterr().out

    def test_bounds(self, trained, roll_data, tmp_path):
        out = tmp_path / "bounds.txt"
        assert run(["bounds", "--ckpt", str(trained / "final.ckpt"), "--data", str(roll_data), "--out", str(out)]) == 0
        table, _ = load_matrix(out)
        assert table.shape == (4, 3)
        assert np.all(table[:, 2] <= table[:, 1])

    def test_inpainting_keeps_the_observed_coordinate(self, trained, tmp_path):
        (tmp_path / "obs.txt").write_text("0.5\n-0.25\n")
        (tmp_path / "mask.txt").write_text("1\n0\n")
        out = tmp_path / "filled.txt"
        argv = ["conditional", "--ckpt", str(trained / "final.ckpt"), "--obs", str(tmp_path / "obs.txt"),
                "--mask", str(tmp_path / "mask.txt"), "--n", "30", "--out", str(out)]
        assert run(argv) == 0
        samples, _ = load_matrix(out)
        assert samples.shape == (30, 2)
        np.testing.assert_array_equal(samples[:, 0], 0.5)

    def test_denoising(self, trained, tmp_path):
        (tmp_path / "obs.txt").write_text("0.5\n-0.25\n")
        out = tmp_path / "denoised.txt"
        argv = ["conditional", "--ckpt", str(trained / "final.ckpt"), "--obs", str(tmp_path / "obs.txt"),
                "--noise-var", "0.2", "--schedule", "annealed", "--n", "30", "--out", str(out)]
        assert run(argv) == 0
        assert load_matrix(out)[0].shape == (30, 2)

    def test_conditional_needs_a_factor(self, trained, tmp_path, capsys):
        (tmp_path / "obs.txt").write_text("0.5\n-0.25\n")
        argv = ["conditional", "--ckpt", str(trained / "final.ckpt"), "--obs", str(tmp_path / "obs.txt"),
                "--out", str(tmp_path / "x.txt")]
        assert run(argv) == 1
        assert "InvalidArgumentError" in capsys.readouterr().err

    def test_same_config_same_checkpoint(self, trained, tmp_path):
        config = tmp_path / "again.cfg"
        config.write_text(TINY_CONFIG.format(out="run_again"))
        assert run(["train", "--config", str(config)]) == 0
        assert (tmp_path / "run_again" / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()


class TestFailures:
    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["sample", "--ckpt", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "s.txt")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("❌")
        assert err.count("\n") == 1

    def test_binomial_checkpoint_on_continuous_data(self, roll_data, tmp_path, capsys):
        spec = binomial_spec(T=4, dim=2)
        ckpt = tmp_path / "bits.ckpt"
        save_checkpoint(ckpt, Checkpoint(model=build_mlp_model(spec, np.random.default_rng(0), hidden_sizes=(3,))))
        assert run(["evaluate", "--ckpt", str(ckpt), "--data", str(roll_data)]) == 1
        assert "KindMismatchError" in capsys.readouterr().err

    def test_locked_run_directory(self, tmp_path, capsys):
        config = tmp_path / "tiny.cfg"
        config.write_text(TINY_CONFIG.format(out="busy"))
        (tmp_path / "busy").mkdir()
        (tmp_path / "busy" / ".lock").write_text("123\n")
        assert run(["train", "--config", str(config)]) == 1
        assert "in use" in capsys.readouterr().err
        assert not (tmp_path / "busy" / "final.ckpt").exists()

    def test_bad_config(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("T = 4\nwidth = 9\n")
        assert run(["train", "--config", str(config)]) == 1
        assert "ConfigError" in capsys.readouterr().err
