import math

import numpy as np
import pytest

from src.config import TrainConfig
from src.diffusion import objective
from src.diffusion.approximators import build_mlp_model, build_rbf_model, stationary_model
from src.diffusion.objective import (
    FrozenNoise,
    TrainingLog,
    bound_terms,
    draw_bound_inputs,
    edge_reverse_kernel,
    frozen_noise_trajectory,
    null_baseline,
    train,
)
from src.errors import (
    InvalidArgumentError,
    KindMismatchError,
    NonFiniteError,
    TrainingDivergedError,
    UnsupportedOperationError,
)
from src.tools.datasets import heartbeat, swiss_roll
from tests.helpers import binomial_spec, gaussian_spec

HALF_LOG2_2PIE = 0.5 * math.log2(2.0 * math.pi * math.e)


class TestEdgeRule:
    def test_gaussian_edge_kernel(self):
        spec = gaussian_spec(T=10, mode="learnable", beta1=1e-6)
        dist = edge_reverse_kernel(spec, np.array([0.4]))
        np.testing.assert_allclose(dist.variance, [1e-6])
        np.testing.assert_allclose(dist.mean, [0.4 * math.sqrt(1 - 1e-6)])

    def test_binomial_edge_kernel_is_nearly_the_identity(self):
        spec = binomial_spec(T=2000, dim=3)
        x1 = np.array([1.0, 0.0, 1.0])
        assert np.max(np.abs(edge_reverse_kernel(spec, x1).rate - x1)) < 5e-4


class TestFrozenNoise:
    def test_zero_noise_follows_the_marginal_mean(self):
        spec = gaussian_spec(T=6, dim=2)
        x0 = np.array([[1.0, -2.0], [0.5, 0.25]])
        states = frozen_noise_trajectory(spec, x0, FrozenNoise(np.zeros((6, 2, 2))))
        expected = np.sqrt(spec.schedule.alpha_bar)[:, None, None] * x0
        np.testing.assert_allclose(states, expected, atol=1e-12)

    def test_reproducible(self, rng):
        spec = gaussian_spec(T=5, dim=2)
        noise = FrozenNoise.draw(rng, 5, (3, 2))
        x0 = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(frozen_noise_trajectory(spec, x0, noise),
                                      frozen_noise_trajectory(spec, x0, noise))

    def test_binomial_has_no_frozen_noise(self):
        with pytest.raises(UnsupportedOperationError):
            frozen_noise_trajectory(binomial_spec(T=4, dim=2), np.zeros(2), FrozenNoise(np.zeros((4, 2))))

    def test_noise_shape_must_fit(self):
        with pytest.raises(InvalidArgumentError):
            frozen_noise_trajectory(gaussian_spec(T=5, dim=2), np.zeros(2), FrozenNoise(np.zeros((4, 2))))


class TestBound:
    def test_true_reverse_kernel_recovers_the_data_entropy(self, standard_normal_model, rng):
        spec, model = standard_normal_model
        data = rng.standard_normal((20000, 1))
        bound = bound_terms(spec, model, data, rng)
        assert abs(bound.total_bits + HALF_LOG2_2PIE) < 4 * bound.stderr_bits + 1e-3

    def test_expected_kl_terms_have_a_closed_form(self, rng):
        # E KL = -1/2 log((1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)) = 1/2 log(t / (t - 1)) under the fixed rule
        spec = gaussian_spec(T=10, dim=1)
        bound = bound_terms(spec, stationary_model(spec), rng.standard_normal((20000, 1)), rng)
        expected = 0.5 * np.log(bound.steps / (bound.steps - 1.0))
        np.testing.assert_allclose(bound.kl_terms, expected, rtol=0.05, atol=1e-3)

    def test_frozen_noise_makes_the_bound_reproducible(self, small_rbf, rng):
        spec, model, data = small_rbf
        noise = FrozenNoise.draw(rng, spec.T, data.shape)
        assert bound_terms(spec, model, data, noise).total == bound_terms(spec, model, data, noise).total

    def test_kl_terms_are_nonnegative(self, small_mlp, rng):
        spec, model, data = small_mlp
        bound = bound_terms(spec, model, data, rng)
        assert bound.steps.tolist() == list(range(2, spec.T + 1))
        assert np.all(bound.kl_terms >= -1e-12)
        assert bound.kl_weight == 1.0

    def test_breakdown_adds_up(self, small_rbf, rng):
        spec, model, data = small_rbf
        bound = bound_terms(spec, model, data, rng)
        assembled = -bound.kl_sum + bound.entropy_T - bound.entropy_1 - bound.cross_entropy_T + bound.edge_term
        assert bound.total == pytest.approx(assembled, rel=1e-12, abs=1e-12)
        report = bound.as_dict()
        assert report["total_bits"] == pytest.approx(bound.total / math.log(2.0))
        assert report["batch_size"] == data.shape[0]

    def test_t_subsampling_rescales_the_kl_sum(self, rng):
        spec = binomial_spec(T=10, dim=3)
        model = build_mlp_model(spec, rng, hidden_sizes=(4,))
        data = (rng.random((20, 3)) < 0.5).astype(float)
        bound = bound_terms(spec, model, data, rng, t_subsample=3)
        assert bound.steps.size == 3
        assert len(set(bound.steps.tolist())) == 3
        assert bound.kl_weight == pytest.approx(9 / 3)

    def test_t_subsampling_is_unbiased(self, small_mlp, rng):
        spec, model, data = small_mlp
        draws = 10_000
        full = np.array([bound_terms(spec, model, data, rng).total for _ in range(draws)])
        sub = np.array([bound_terms(spec, model, data, rng, t_subsample=2).total for _ in range(draws)])
        stderr = math.sqrt(full.var() / draws + sub.var() / draws)
        assert abs(full.mean() - sub.mean()) < 4 * stderr

    def test_non_finite_term_names_the_step(self, small_rbf, rng):
        spec, model, data = small_rbf
        broken = model.with_parameters(model.params.with_values(np.full(len(model.params), np.nan)))
        with pytest.raises(NonFiniteError) as info:
            bound_terms(spec, broken, data, rng)
        assert info.value.node.startswith("kl[t=")

    def test_model_kind_must_match(self, small_mlp, rng):
        _, model, _ = small_mlp
        spec = gaussian_spec(T=8, dim=4)
        with pytest.raises(KindMismatchError):
            bound_terms(spec, model, rng.standard_normal((5, 4)), rng)

    def test_bound_inputs_need_randomness(self):
        with pytest.raises(InvalidArgumentError):
            draw_bound_inputs(gaussian_spec(T=4), np.zeros((2, 1)))


class TestNullBaseline:
    def test_fair_coin_heartbeat(self):
        data = heartbeat(200, 1)
        assert null_baseline(binomial_spec(T=10, dim=20), data) == pytest.approx(-20.0)

    def test_biased_coin_heartbeat(self):
        # four pulses and sixteen silent bins per sequence
        data = heartbeat(200, 1)
        null = null_baseline(binomial_spec(T=10, dim=20, p=0.2), data)
        assert null == pytest.approx(4 * math.log2(0.2) + 16 * math.log2(0.8))
        assert -2.414 - null == pytest.approx(12.024, abs=1e-3)

    def test_standard_normal_density(self, rng):
        data = rng.standard_normal((50, 2))
        expected = np.mean(-math.log(2 * math.pi) - 0.5 * np.sum(data ** 2, axis=1)) / math.log(2.0)
        assert null_baseline(gaussian_spec(T=4, dim=2), data) == pytest.approx(expected)


class TestTraining:
    def test_zero_steps_leave_the_parameters_alone(self, small_rbf):
        spec, model, data = small_rbf
        trained, log = train(spec, model, data, TrainConfig(steps=0))
        np.testing.assert_array_equal(trained.params.values, model.params.values)
        assert log.rows == []

    def test_deterministic_given_the_seed(self, rng):
        spec = gaussian_spec(T=5, dim=2, mode="learnable")
        data = rng.standard_normal((100, 2))
        model = build_rbf_model(spec, data, rng, hidden=4)
        config = TrainConfig(steps=5, batch_size=20, log_every=2, learn_schedule=True, seed=7)
        first, log = train(spec, model, data, config)
        second, _ = train(spec, model, data, config)
        np.testing.assert_array_equal(first.params.values, second.params.values)
        np.testing.assert_array_equal(first.spec.schedule.beta, second.spec.schedule.beta)
        assert [row.step for row in log.rows] == [2, 4, 5]
        assert first.spec.schedule.beta[0] == spec.schedule.beta[0]
        assert not np.array_equal(first.spec.schedule.beta, spec.schedule.beta)

    def test_every_trained_parameter_moves(self, rng):
        spec = gaussian_spec(T=5, dim=2, mode="learnable")
        data = swiss_roll(200, 0).values
        model = build_rbf_model(spec, data, rng, hidden=4)
        config = TrainConfig(steps=3, batch_size=50, learning_rate=1e-2, learn_schedule=True, seed=1)
        trained, _ = train(spec, model, data, config)
        for name in ("rbf.centers", "rbf.log_width"):
            assert np.all(trained.params[name] != model.params[name]), name
        for name in ("readout.mu.weight", "readout.mu.bias", "readout.sigma.weight", "readout.sigma.bias"):
            # row 0 drives t = 1, which the edge rule replaces
            np.testing.assert_array_equal(trained.params[name][0], model.params[name][0])
            assert np.all(trained.params[name][1:] != model.params[name][1:]), name
        assert np.all(trained.spec.schedule.unconstrained != spec.schedule.unconstrained)

    def test_checkpoint_hook(self, small_mlp):
        spec, model, data = small_mlp
        seen = []
        config = TrainConfig(steps=4, batch_size=8, checkpoint_every=2)
        train(spec, model, data, config, on_checkpoint=lambda step, m, log: seen.append(step))
        assert seen == [2, 4]

    def test_divergence_keeps_the_last_good_model(self, small_mlp, monkeypatch):
        spec, model, data = small_mlp
        real = objective.evaluate_with_gradients
        calls = []

        def flaky(params, fn):
            calls.append(1)
            if len(calls) == 2:
                raise NonFiniteError("non-finite value at node 'kl'", node="kl")
            return real(params, fn)

        monkeypatch.setattr(objective, "evaluate_with_gradients", flaky)
        with pytest.raises(TrainingDivergedError) as info:
            train(spec, model, data, TrainConfig(steps=5, batch_size=8, log_every=1))
        assert info.value.step == 2
        assert info.value.last_good is not None
        assert not np.array_equal(info.value.last_good.params.values, model.params.values)
        assert [row.step for row in info.value.log.rows] == [1]

    def test_learning_rate_decays_geometrically(self):
        config = TrainConfig(steps=11, learning_rate=1e-2, final_learning_rate=1e-4)
        assert config.learning_rate_at(0) == pytest.approx(1e-2)
        assert config.learning_rate_at(5) == pytest.approx(1e-3)
        assert config.learning_rate_at(10) == pytest.approx(1e-4)


class TestTrainingLog:
    def test_csv_round_trip(self, tmp_path):
        log = TrainingLog()
        log.record(50, 1.25, -3.5, 0.1)
        log.record(100, 2.5, -2.75, 0.05)
        log.write(tmp_path / "train_log.csv")
        again = TrainingLog.read(tmp_path / "train_log.csv")
        assert again.rows == log.rows
        assert again.final_k_bits == -2.75

    def test_rejects_a_foreign_header(self):
        with pytest.raises(InvalidArgumentError):
            TrainingLog.from_csv("epoch,loss\n1,0.5\n")

