import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.diffusion import autodiff as ad
from src.diffusion.approximators import ParameterVector, evaluate_with_gradients, finite_difference_check
from src.errors import InvalidArgumentError, NonFiniteError

finite = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False, allow_infinity=False)


def test_constant_objective_has_zero_gradient():
    params = ParameterVector.from_arrays({"w": np.array([1.0, -2.0]), "b": np.array(0.5)})
    value, grad = evaluate_with_gradients(params, lambda tensors: 3.0)
    assert value == 3.0
    np.testing.assert_array_equal(grad.values, np.zeros(3))


@given(st.lists(finite, min_size=1, max_size=8))
def test_half_squared_norm_gradient_is_the_parameters(values):
    params = ParameterVector.from_arrays({"w": np.array(values)})
    value, grad = evaluate_with_gradients(params, lambda t: 0.5 * ad.reduce_sum(t["w"] * t["w"]))
    assert value == pytest.approx(0.5 * float(np.sum(np.square(values))))
    np.testing.assert_allclose(grad["w"], values, rtol=0, atol=1e-12)


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=5))
def test_linear_objective_matches_finite_differences_to_rounding(pairs):
    coefficients = np.array([c for c, _ in pairs]) / 3.0
    params = ParameterVector.from_arrays({"w": np.array([w for _, w in pairs]) / 3.0})
    error = finite_difference_check(params, lambda t: ad.reduce_sum(t["w"] * coefficients), eps=1e-5)
    assert error < 1e-9


def test_composite_graph_matches_finite_differences(rng):
    a = rng.standard_normal((3, 4))
    params = ParameterVector.from_arrays({
        "w": rng.standard_normal(4),
        "m": rng.standard_normal((2, 3)),
        "s": rng.standard_normal(3),
    })

    def objective(t):
        h = ad.tanh(ad.einsum("ij,j->i", a, t["w"])) + ad.softplus(t["s"])
        z = ad.einsum("ki,i->k", t["m"], ad.sigmoid(h))
        stacked = ad.stack([z, ad.cumsum(z), ad.take(t["s"], np.array([0, 2]), axis=0)])
        mixed = ad.softmax(stacked, axis=-1) * ad.exp(0.1 * stacked)
        return ad.logsumexp(mixed.reshape(-1)) + (t["w"][1:] ** 2).mean() + ad.sqrt(1.0 + t["s"] * t["s"]).sum()

    assert finite_difference_check(params, objective, eps=1e-5) < 1e-6


def test_clip_blocks_gradient_outside_the_range():
    params = ParameterVector.from_arrays({"w": np.array([-2.0, 0.5, 2.0])})
    _, grad = evaluate_with_gradients(params, lambda t: ad.reduce_sum(ad.clip(t["w"], -1.0, 1.0)))
    np.testing.assert_array_equal(grad["w"], [0.0, 1.0, 0.0])


def test_repeated_gather_accumulates():
    params = ParameterVector.from_arrays({"w": np.array([1.0, 2.0, 3.0])})
    _, grad = evaluate_with_gradients(params, lambda t: ad.reduce_sum(ad.take(t["w"], np.array([0, 0, 2]))))
    np.testing.assert_array_equal(grad["w"], [2.0, 0.0, 1.0])


@pytest.mark.parametrize("indices, axis", [
    (np.array([[0, 2], [2, 1]]), 1),
    (np.array([[3], [3]]), 2),
    (np.array([1, 1, 0]), 0),
    (np.array(1), -1),
])
def test_gather_gradient_for_any_index_shape_and_axis(rng, indices, axis):
    params = ParameterVector.from_arrays({"w": rng.standard_normal((2, 3, 4))})
    gathered_shape = np.take(params["w"], indices, axis=axis).shape
    weights = rng.standard_normal(gathered_shape)

    def objective(t):
        return ad.reduce_sum(ad.take(t["w"], indices, axis=axis) * weights)

    assert finite_difference_check(params, objective, eps=1e-5) < 1e-8


def test_non_finite_value_names_the_node():
    params = ParameterVector.from_arrays({"w": np.array([-1.0, 1.0])})
    with pytest.raises(NonFiniteError) as info:
        evaluate_with_gradients(params, lambda t: ad.reduce_sum(ad.log(t["w"]).named("log_w")))
    assert info.value.node == "log_w"


def test_dispatch_keeps_plain_arrays_plain():
    x = np.array([0.0, 1.0])
    assert isinstance(ad.sigmoid(x), np.ndarray)
    assert isinstance(ad.einsum("i,i->", x, x), (np.ndarray, float, np.floating))
    assert isinstance(ad.sigmoid(ad.variable(x)), ad.Tensor)


def test_constant_tensors_record_no_graph():
    out = ad.Tensor(np.ones(3)) * 2.0 + 1.0
    assert not out.requires_grad
    assert out.topological_order() == [out]


def test_einsum_rejects_operand_only_sums():
    with pytest.raises(InvalidArgumentError):
        ad.einsum("ij,k->k", ad.variable(np.ones((2, 2))), np.ones(3))


def test_non_scalar_objective_is_rejected():
    params = ParameterVector.from_arrays({"w": np.ones(2)})
    with pytest.raises(InvalidArgumentError):
        evaluate_with_gradients(params, lambda t: t["w"] * 2.0)


def test_parameter_vector_merge_and_part():
    model = ParameterVector.from_arrays({"a": np.arange(6.0).reshape(2, 3), "b": np.array([7.0])})
    schedule = ParameterVector.from_arrays({"u": np.array([-1.0, 1.0])})
    merged = ParameterVector.merge({"model": model, "schedule": schedule})
    assert list(merged.names()) == ["model/a", "model/b", "schedule/u"]
    np.testing.assert_array_equal(merged.part("model").values, model.values)
    assert merged.part("model").layout == model.layout


def test_parameter_vector_rejects_a_gapped_layout():
    with pytest.raises(InvalidArgumentError):
        ParameterVector(values=np.zeros(3), layout={"a": (0, (2,)), "b": (3, (1,))})
