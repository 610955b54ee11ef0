import math
from pathlib import Path

import pytest

from src.config import Config, ModelConfig, RunConfig, TrainConfig, load_run_config, parse_key_values
from src.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParseKeyValues:
    def test_comments_and_blank_lines(self):
        values = parse_key_values("# header\n\nT = 40  # steps\nname=roll\n")
        assert values == {"T": "40", "name": "roll"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_key_values("T = 4\nsteps 10\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_key_values("T = 4\nT = 5\n")


class TestShippedConfigs:
    def test_swiss_roll(self):
        config = load_run_config(CONFIGS / "swiss_roll.cfg")
        assert (config.kind, config.T, config.schedule) == ("gaussian", 40, "learnable")
        assert config.model.architecture == "rbf"
        assert config.train.learn_schedule
        assert config.beta1 == 1e-6
        assert config.model.readout == "per_step"
        assert config.output_dir == (CONFIGS / "runs" / "swiss_roll").resolve()

    def test_heartbeat(self):
        config = load_run_config(CONFIGS / "heartbeat.cfg")
        assert (config.kind, config.T, config.schedule) == ("binomial", 2000, "fixed")
        assert config.model.mlp_hidden == (50, 50, 50)
        assert config.model.readout == "per_step"
        assert config.model.readout_transform
        assert config.train.t_subsample == 256
        assert config.sample_count == 500
        assert config.equilibrium_rate == 0.5


class TestLoadRunConfig:
    def test_paths_resolve_next_to_the_file(self, tmp_path):
        path = write_config(tmp_path, "name = tiny\ndata_file = data/roll.txt\noutput_dir = out\n")
        config = load_run_config(path)
        assert config.data_file == (tmp_path / "data" / "roll.txt").resolve()
        assert config.output_dir == (tmp_path / "out").resolve()

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown keys"):
            load_run_config(write_config(tmp_path, "T = 4\nlayers = 3\n"))

    def test_bad_value(self, tmp_path):
        with pytest.raises(ConfigError, match="T"):
            load_run_config(write_config(tmp_path, "T = many\n"))

    def test_mlp_needs_binomial_diffusion(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(write_config(tmp_path, "kind = gaussian\narchitecture = mlp\n"))

    def test_binomial_schedule_cannot_be_learned(self, tmp_path):
        text = "kind = binomial\nschedule = learnable\narchitecture = mlp\n"
        with pytest.raises(ConfigError):
            load_run_config(write_config(tmp_path, text))

    def test_layer_sizes_must_be_integers(self, tmp_path):
        text = "kind = binomial\nschedule = fixed\narchitecture = mlp\nmlp_hidden = a,b\n"
        with pytest.raises(ConfigError, match="mlp_hidden"):
            load_run_config(write_config(tmp_path, text))

    def test_models_are_frozen(self):
        config = RunConfig(model=ModelConfig(), train=TrainConfig())
        with pytest.raises(Exception):
            config.T = 3


def test_bits():
    assert Config.bits(math.log(2.0)) == pytest.approx(1.0)
    assert Config.bits(0.0) == 0.0
