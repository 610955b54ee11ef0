"""Shared builders for the test modules."""

from src.diffusion.kernels import DiffusionSpec, make_schedule


def gaussian_spec(T=10, dim=1, mode="fixed", beta1=1e-4):
    return DiffusionSpec(schedule=make_schedule("gaussian", T, beta1=beta1, mode=mode), dim=dim)


def binomial_spec(T=8, dim=4, p=0.5):
    return DiffusionSpec(schedule=make_schedule("binomial", T), dim=dim, equilibrium_rate=p)


def perturbed(model, rng, scale=0.3):
    """Same model with every parameter moved off its initial value."""
    values = model.params.values + scale * rng.standard_normal(len(model.params))
    return model.with_parameters(model.params.with_values(values))
