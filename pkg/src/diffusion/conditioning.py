"""
Multiplying the learned model by a second distribution r(x).

Each reverse step is replaced by the normalized product
p(x_{t-1} | x_t) r_{t-1}(x_{t-1}) / Z_t(x_t). Coordinate masks and Gaussian
observations multiply in closed form; a generic factor perturbs the Gaussian
mean to first order or, for binomial diffusion, multiplies per-bit rates.

Normalizing every step changes the law of the chain. Where Z_t is available
in closed form the sampler carries importance weights
log Z_t(x_t) - log r_t(x_t), resamples when the effective sample size falls
below half the particle count, and returns equally weighted samples.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from src.diffusion.approximators import ReverseModel
from src.diffusion.inference import draw_equilibrium, reverse_kernel
from src.diffusion.kernels import (
    DiagonalDistribution,
    DiffusionSpec,
    bernoulli_log_prob,
    clamp_rate,
    gaussian_log_prob,
    sample,
)
from src.errors import InvalidArgumentError, KindMismatchError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoordinateMask:
    """r(x) is a delta on the known coordinates and constant elsewhere."""

    mask: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask).astype(bool)
        values = np.asarray(self.values, dtype=np.float64)
        if mask.shape != values.shape or mask.ndim != 1:
            raise InvalidArgumentError(f"mask {mask.shape} and values {values.shape} must be matching vectors")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=np.float64)
        x[..., self.mask] = self.values[self.mask]
        return x


@dataclass(frozen=True)
class GaussianObservation:
    """r(x) = N(y; x, noise_variance I)."""

    y: np.ndarray
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        if not self.noise_variance > 0.0:
            raise InvalidArgumentError(f"noise variance must be positive, got {self.noise_variance}")

    def log_r(self, x: np.ndarray, exponent: float = 1.0) -> np.ndarray:
        return exponent * gaussian_log_prob(x, self.y, self.noise_variance)


@dataclass(frozen=True)
class GenericFactor:
    """
    A factor known only through its local shape.

    ``grad_log_r`` maps states [..., d] to the gradient of log r (Gaussian
    diffusion); ``bit_rates`` holds d_i = r(x_i = 1) (binomial diffusion).
    """

    grad_log_r: Optional[Callable[[np.ndarray], np.ndarray]] = None
    bit_rates: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.bit_rates is not None:
            rates = np.asarray(self.bit_rates, dtype=np.float64)
            if not np.all((rates >= 0.0) & (rates <= 1.0)):
                raise InvalidArgumentError("per-bit factor rates must lie in [0, 1]")
            object.__setattr__(self, "bit_rates", rates)
        if (self.grad_log_r is None) == (self.bit_rates is None):
            raise InvalidArgumentError("a generic factor needs exactly one of grad_log_r or bit_rates")


ExternalFactor = Union[CoordinateMask, GaussianObservation, GenericFactor]


@dataclass(frozen=True)
class RSchedule:
    """r_t = r^exponent(t): constant, or annealed with exponent (T - t) / T."""

    mode: Literal["constant", "annealed"] = "constant"

    def __post_init__(self):
        if self.mode not in ("constant", "annealed"):
            raise InvalidArgumentError(f"unknown r schedule {self.mode!r}")

    def exponent(self, t: int, T: int) -> float:
        if self.mode == "constant":
            return 1.0
        return (T - t) / T


@dataclass
class NormalizerLedger:
    """
    Per-step log normalizers log Z_t(x_t), one value per particle.

    ``implicit`` marks the perturbative Gaussian path, which leaves Z_t
    untracked. ``log_weights`` are the importance weights after the last step.
    """

    implicit: bool = False
    steps: List[int] = field(default_factory=list)
    log_normalizers: List[np.ndarray] = field(default_factory=list)
    effective_sizes: List[float] = field(default_factory=list)
    resampled_at: List[int] = field(default_factory=list)
    log_weights: Optional[np.ndarray] = None

    def record(self, t: int, log_z: np.ndarray) -> None:
        log_z = np.asarray(log_z, dtype=np.float64)
        if not np.isfinite(log_z).all():
            raise InvalidArgumentError(f"non-finite normalizer at t={t}")
        self.steps.append(t)
        self.log_normalizers.append(log_z)


# ---------------------------------------------------------------------------
# Kernel products
# ---------------------------------------------------------------------------

def perturbed_gaussian_kernel(moments: DiagonalDistribution, grad_log_r: np.ndarray) -> DiagonalDistribution:
    """First-order product with r: mean + variance * grad log r at the mean; variance unchanged."""
    if moments.kind != "gaussian":
        raise KindMismatchError("perturbed_gaussian_kernel needs gaussian moments")
    grad = np.asarray(grad_log_r, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise InvalidArgumentError("grad log r must be finite")
    return DiagonalDistribution.gaussian(moments.mean + moments.variance * grad, moments.variance)


def exact_gaussian_product(moments: DiagonalDistribution, y: np.ndarray, sigma_r2: float) -> DiagonalDistribution:
    """Conjugate product of N(mean, variance) with N(y, sigma_r2), per dimension."""
    if moments.kind != "gaussian":
        raise KindMismatchError("exact_gaussian_product needs gaussian moments")
    if not sigma_r2 > 0.0:
        raise InvalidArgumentError(f"sigma_r2 must be positive, got {sigma_r2}")
    if math.isinf(sigma_r2):
        return moments
    precision = 1.0 / moments.variance + 1.0 / sigma_r2
    variance = 1.0 / precision
    mean = variance * (moments.mean / moments.variance + np.asarray(y, dtype=np.float64) / sigma_r2)
    return DiagonalDistribution.gaussian(mean, variance)


def perturbed_binomial_kernel(c: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Bernoulli(c) times the per-bit factor d, normalized over the two outcomes."""
    c = clamp_rate(np.asarray(c, dtype=np.float64))
    d_r = clamp_rate(np.asarray(d_r, dtype=np.float64))
    on = c * d_r
    return on / (on + (1.0 - c) * (1.0 - d_r))


def tempered_bit_rates(d_r: np.ndarray, exponent: float) -> np.ndarray:
    """Per-bit rates of r^exponent."""
    d_r = clamp_rate(np.asarray(d_r, dtype=np.float64))
    on = exponent * np.log(d_r)
    off = exponent * np.log1p(-d_r)
    return np.exp(on - np.logaddexp(on, off))


def binomial_log_normalizer(c: np.ndarray, d_r: np.ndarray, exponent: float = 1.0) -> np.ndarray:
    """log sum over x of Bernoulli(x; c) r^exponent(x) for a per-bit factor, summed over bits."""
    c = clamp_rate(np.asarray(c, dtype=np.float64))
    d_r = clamp_rate(np.asarray(d_r, dtype=np.float64))
    terms = np.logaddexp(np.log(c) + exponent * np.log(d_r), np.log1p(-c) + exponent * np.log1p(-d_r))
    return np.sum(terms, axis=-1)


def _bit_log_r(x: np.ndarray, d_r: np.ndarray, exponent: float) -> np.ndarray:
    return exponent * bernoulli_log_prob(x, d_r)


def _gaussian_power_constant(noise_variance: float, exponent: float, d: int) -> float:
    """log N(y; x, s)^e - log N(y; x, s / e), constant in x."""
    return 0.5 * d * (math.log(2.0 * math.pi * noise_variance / exponent)
                      - exponent * math.log(2.0 * math.pi * noise_variance))


# ---------------------------------------------------------------------------
# Conditional sampling
# ---------------------------------------------------------------------------

def _check_factor(spec: DiffusionSpec, factor: ExternalFactor) -> None:
    d = spec.dim
    if isinstance(factor, CoordinateMask):
        if factor.mask.size != d:
            raise InvalidArgumentError(f"mask has {factor.mask.size} entries, data has {d}")
        if spec.kind == "binomial" and not np.isin(factor.values[factor.mask], (0.0, 1.0)).all():
            raise InvalidArgumentError("observed bits must be 0 or 1")
    elif isinstance(factor, GaussianObservation):
        if spec.kind != "gaussian":
            raise InvalidArgumentError("gaussian observations need gaussian diffusion")
        if factor.y.shape != (d,):
            raise InvalidArgumentError(f"observation has shape {factor.y.shape}, expected ({d},)")
    elif isinstance(factor, GenericFactor):
        if spec.kind == "gaussian" and factor.grad_log_r is None:
            raise InvalidArgumentError("gaussian diffusion needs a grad_log_r factor")
        if spec.kind == "binomial":
            if factor.bit_rates is None:
                raise InvalidArgumentError("binomial diffusion needs per-bit factor rates")
            if factor.bit_rates.shape != (d,):
                raise InvalidArgumentError(f"bit rates have shape {factor.bit_rates.shape}, expected ({d},)")
    else:
        raise InvalidArgumentError(f"unknown factor type {type(factor).__name__}")


def _multiply(spec: DiffusionSpec, dist: DiagonalDistribution, factor: ExternalFactor,
              exponent: float) -> Tuple[DiagonalDistribution, Optional[np.ndarray]]:
    """
    Product of one kernel with r^exponent and its log normalizer.

    The normalizer is None for the perturbative path. For a coordinate mask
    the product is the kernel itself (clamping happens after sampling) and
    the normalizer is the kernel's density at the observed values.
    """
    if exponent == 0.0:
        batch = (dist.mean if dist.kind == "gaussian" else dist.rate).shape[:-1]
        return dist, np.zeros(batch)

    if isinstance(factor, CoordinateMask):
        known = factor.mask
        if dist.kind == "gaussian":
            log_z = gaussian_log_prob(factor.values[known], dist.mean[..., known], dist.variance[..., known])
        else:
            log_z = bernoulli_log_prob(factor.values[known], dist.rate[..., known])
        return dist, log_z

    if isinstance(factor, GaussianObservation):
        effective = factor.noise_variance / exponent
        product = exact_gaussian_product(dist, factor.y, effective)
        log_z = (gaussian_log_prob(factor.y, dist.mean, dist.variance + effective)
                 + _gaussian_power_constant(factor.noise_variance, exponent, spec.dim))
        return product, log_z

    if dist.kind == "gaussian":
        return perturbed_gaussian_kernel(dist, exponent * factor.grad_log_r(dist.mean)), None
    rates = perturbed_binomial_kernel(dist.rate, tempered_bit_rates(factor.bit_rates, exponent))
    return DiagonalDistribution.bernoulli(rates), binomial_log_normalizer(dist.rate, factor.bit_rates, exponent)


def _log_r(factor: ExternalFactor, x: np.ndarray, exponent: float) -> np.ndarray:
    """log r^exponent(x); the delta of a mask counts as 1 on clamped states."""
    if exponent == 0.0 or isinstance(factor, CoordinateMask):
        return np.zeros(x.shape[:-1])
    if isinstance(factor, GaussianObservation):
        return factor.log_r(x, exponent)
    return _bit_log_r(x, factor.bit_rates, exponent)


def _effective_size(log_weights: np.ndarray) -> float:
    normalized = np.exp(log_weights - logsumexp(log_weights))
    return float(1.0 / np.sum(normalized ** 2))


def systematic_resample(log_weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling from normalized weights."""
    n = log_weights.size
    weights = np.exp(log_weights - logsumexp(log_weights))
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def sample_conditional(spec: DiffusionSpec, model: ReverseModel, factor: ExternalFactor, r_sched: RSchedule,
                       rng: np.random.Generator, n: int = 1,
                       resample: bool = True) -> Tuple[np.ndarray, NormalizerLedger]:
    """
    Sample x_0 from the model multiplied by r.

    Args:
        spec: diffusion description
        model: reverse model
        factor: coordinate mask, Gaussian observation or generic factor
        r_sched: how r is spread over the trajectory
        rng: explicit random generator
        n: number of particles (samples)
        resample: carry importance weights and resample; False runs the plain
                  normalized chain

    Returns:
        (samples [n, d], ledger)
    """
    _check_factor(spec, factor)
    if n < 1:
        raise InvalidArgumentError(f"sample count must be positive, got {n}")
    T = spec.T
    perturbative = isinstance(factor, GenericFactor) and spec.kind == "gaussian"
    ledger = NormalizerLedger(implicit=perturbative)
    log_weights = np.zeros(n)

    # x_T from pi times r_T
    x = draw_equilibrium(spec, n, rng)
    exponent = r_sched.exponent(T, T)
    if exponent > 0.0 and not isinstance(factor, CoordinateMask):
        start, _ = _multiply(spec, _equilibrium_batch(spec, n), factor, exponent)
        x = sample(start, rng)
    if isinstance(factor, CoordinateMask) and exponent > 0.0:
        x = factor.clamp(x)

    for t in range(T, 0, -1):
        dist = reverse_kernel(spec, model, x, t)
        next_exponent = r_sched.exponent(t - 1, T)
        product, log_z = _multiply(spec, dist, factor, next_exponent)
        if log_z is not None:
            ledger.record(t, log_z)
            if resample:
                log_weights = log_weights + log_z - _log_r(factor, x, r_sched.exponent(t, T))
                ess = _effective_size(log_weights)
                ledger.effective_sizes.append(ess)
                if ess < 0.5 * n:
                    index = systematic_resample(log_weights, rng)
                    product = _select(product, index)
                    log_weights = np.zeros(n)
                    ledger.resampled_at.append(t)
        x = sample(product, rng)
        if isinstance(factor, CoordinateMask) and next_exponent > 0.0:
            x = factor.clamp(x)

    if resample and not perturbative and np.ptp(log_weights) > 0.0:
        x = x[systematic_resample(log_weights, rng)]
        ledger.resampled_at.append(0)
        log_weights = np.zeros(n)
    ledger.log_weights = log_weights
    logger.debug("conditional sampling: %d particles, %d resampling events", n, len(ledger.resampled_at))
    return x, ledger


def _equilibrium_batch(spec: DiffusionSpec, n: int) -> DiagonalDistribution:
    if spec.kind == "gaussian":
        return DiagonalDistribution.gaussian(np.zeros((n, spec.dim)), np.ones((n, spec.dim)))
    return DiagonalDistribution.bernoulli(np.full((n, spec.dim), spec.equilibrium_rate))


def _select(dist: DiagonalDistribution, index: np.ndarray) -> DiagonalDistribution:
    if dist.kind == "gaussian":
        return DiagonalDistribution.gaussian(dist.mean[index], dist.variance[index])
    return DiagonalDistribution.bernoulli(dist.rate[index])


def inpaint(spec: DiffusionSpec, model: ReverseModel, mask: np.ndarray, values: np.ndarray,
            rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Fill the unknown coordinates; known ones are clamped at every step."""
    samples, _ = sample_conditional(spec, model, CoordinateMask(mask, values), RSchedule("constant"), rng, n)
    return samples


def denoise(spec: DiffusionSpec, model: ReverseModel, y: np.ndarray, noise_variance: float,
            rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Posterior samples of x_0 given y = x_0 + noise."""
    factor = GaussianObservation(y, noise_variance)
    samples, _ = sample_conditional(spec, model, factor, RSchedule("constant"), rng, n)
    return samples
