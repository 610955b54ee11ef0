import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from src.errors import InvalidArgumentError
from src.tools.datasets import (
    Dataset,
    generate,
    heartbeat,
    heartbeat_patterns,
    is_heartbeat,
    load_dataset,
    pooled_variance,
    save_dataset,
    split,
    standardize,
    swiss_roll,
)


class TestSwissRoll:
    def test_standardized_to_unit_pooled_variance(self):
        data = swiss_roll(10_000, 0)
        assert data.values.shape == (10_000, 2)
        assert abs(pooled_variance(data.values) - 1.0) < 1e-12
        assert data.factor > 0.0
        assert data.diffusion_kind == "gaussian"

    def test_same_seed_same_points(self):
        np.testing.assert_array_equal(swiss_roll(500, 42).values, swiss_roll(500, 42).values)
        assert not np.array_equal(swiss_roll(500, 42).values, swiss_roll(500, 43).values)

    def test_radius_grows_with_the_angle(self):
        data = swiss_roll(2000, 4, jitter=0.0)
        radius = np.linalg.norm(data.values, axis=1)
        assert stats.spearmanr(radius, data.latent).correlation > 0.99

    def test_radius_equals_the_angle(self):
        data = swiss_roll(20_000, 4, jitter=0.0)
        unscaled = data.values * data.factor
        np.testing.assert_allclose(np.linalg.norm(unscaled, axis=1), data.latent, rtol=1e-12)
        assert data.latent.min() >= 1.5 * np.pi
        assert data.latent.max() <= 4.5 * np.pi
        assert data.factor == pytest.approx(6.79, abs=0.1)

    def test_jitter_is_thin_against_the_roll(self):
        data = swiss_roll(20_000, 5)
        theta = data.latent
        spiral = np.column_stack([theta * np.cos(theta), theta * np.sin(theta)])
        residual = data.values * data.factor - spiral
        assert data.metadata["jitter"] == 0.01
        assert np.std(residual) == pytest.approx(0.01, rel=0.05)
        assert np.std(data.values - spiral / data.factor) < 0.002

    def test_needs_points(self):
        with pytest.raises(InvalidArgumentError):
            swiss_roll(0, 1)


class TestStandardize:
    @settings(deadline=None)
    @given(st.floats(min_value=0.1, max_value=100.0))
    def test_scaling_the_data_scales_the_factor(self, c):
        data = np.random.default_rng(5).standard_normal((50, 3))
        scaled, factor = standardize(data)
        rescaled, rescaled_factor = standardize(c * data)
        assert rescaled_factor == pytest.approx(c * factor)
        np.testing.assert_allclose(rescaled, scaled, atol=1e-12)

    def test_mean_is_kept(self):
        data = np.array([[10.0, 11.0], [12.0, 13.0]])
        scaled, factor = standardize(data)
        np.testing.assert_allclose(scaled * factor, data)

    def test_constant_data(self):
        with pytest.raises(InvalidArgumentError):
            standardize(np.ones((10, 2)))


class TestHeartbeat:
    def test_every_row_is_a_heartbeat(self):
        data = heartbeat(1000, 3)
        assert data.values.shape == (1000, 20)
        assert data.values.sum(axis=1).tolist() == [4.0] * 1000
        assert is_heartbeat(data.values).all()
        assert data.diffusion_kind == "binomial"

    def test_phases_are_uniform(self):
        data = heartbeat(100_000, 11)
        for phase in range(5):
            assert np.mean(data.latent == phase) == pytest.approx(0.2, abs=0.005)

    def test_patterns(self):
        patterns = heartbeat_patterns()
        assert patterns.shape == (5, 20)
        assert is_heartbeat(patterns).all()
        shifted = np.roll(patterns[0], 1)
        assert is_heartbeat(shifted).all()
        broken = patterns[0].copy()
        broken[0] = 0.0
        assert not is_heartbeat(broken).any()

    def test_wrong_length_is_never_a_heartbeat(self):
        assert not is_heartbeat(np.ones((2, 7))).any()


class TestDatasetFiles:
    def test_split_sizes(self, rng):
        train, holdout = split(heartbeat(100, 0), 30, rng)
        assert (train.n, holdout.n) == (70, 30)
        assert train.latent.shape == (70,)
        with pytest.raises(InvalidArgumentError):
            split(heartbeat(10, 0), 10, rng)

    def test_save_and_load_keep_values_and_factor(self, tmp_path):
        data = swiss_roll(300, 9)
        save_dataset(tmp_path / "roll.txt", data)
        again = load_dataset(tmp_path / "roll.txt")
        np.testing.assert_array_equal(again.values, data.values)
        assert again.factor == data.factor
        assert again.kind == "continuous"
        assert again.metadata["seed"] == 9
        assert again.metadata["generator"] == "swiss_roll"

    def test_header_less_files(self, tmp_path):
        np.savetxt(tmp_path / "bits.txt", np.array([[0, 1, 1], [1, 0, 0]]))
        np.savetxt(tmp_path / "reals.txt", np.array([[0.5, 1.5], [2.0, -1.0]]))
        assert load_dataset(tmp_path / "bits.txt").kind == "binary"
        reals = load_dataset(tmp_path / "reals.txt")
        assert reals.kind == "continuous"
        assert reals.factor is None

    def test_header_row_count_must_match(self, tmp_path):
        path = tmp_path / "short.txt"
        path.write_text("# kind=binary n=3 d=2\n0 1\n1 0\n")
        with pytest.raises(InvalidArgumentError):
            load_dataset(path)

    def test_text_that_is_not_a_matrix(self, tmp_path):
        path = tmp_path / "words.txt"
        path.write_text("alpha beta\n")
        with pytest.raises(InvalidArgumentError):
            load_dataset(path)

    def test_generators_by_name(self):
        assert generate("heartbeat", 4, 0).n == 4
        with pytest.raises(InvalidArgumentError):
            generate("mnist", 4, 0)

    def test_binary_values_are_checked(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(kind="binary", values=np.array([[0.0, 0.5]]))
