"""
Diffusion-rate schedules, forward kernels and the closed-form toolbox.

Covers both processes:

* Gaussian diffusion toward N(0, I): x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I).
* Binomial diffusion toward Bernoulli(p): each bit is resampled with rate
  x_{t-1} (1 - beta_t) + p beta_t (p = 0.5 unless configured otherwise).

The ``*_moments`` / ``*_rate`` / ``gaussian_kl`` style helpers are written with
the dispatching functions of ``autodiff`` and therefore accept numpy arrays or
Tensors; the public operations work on ``DiagonalDistribution`` values.
"""

import math
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np
from scipy.special import expit, logit as _np_logit, xlogy

from src.config import Config
from src.diffusion import autodiff as ad
from src.errors import InvalidArgumentError, KindMismatchError, UnsupportedOperationError


DiffusionKind = Literal["gaussian", "binomial"]
DistributionKind = Literal["gaussian", "bernoulli"]

# learnable rates start at the fixed rule, but beta_T = 1 has no finite logit
LEARNABLE_BETA_MAX = 1.0 - 1e-6

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """
    Diffusion-rate sequence beta_1..beta_T (index 0 holds beta_1).

    A learnable schedule keeps beta_1 fixed and sets beta_t = logistic(u_t)
    for t = 2..T from the unconstrained parameters ``unconstrained``.
    """

    kind: DiffusionKind
    beta: np.ndarray
    learnable: bool = False
    unconstrained: Optional[np.ndarray] = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if beta.ndim != 1 or beta.size < 1:
            raise InvalidArgumentError("schedule needs at least one step")
        if not np.all((beta > 0.0) & (beta <= 1.0)):
            raise InvalidArgumentError("every beta_t must lie in (0, 1]")
        if self.kind not in ("gaussian", "binomial"):
            raise InvalidArgumentError(f"unknown diffusion kind {self.kind!r}")
        if self.learnable:
            u = np.asarray(self.unconstrained, dtype=np.float64).copy()
            if u.shape != (beta.size - 1,):
                raise InvalidArgumentError("learnable schedule needs T - 1 unconstrained parameters")
            u.setflags(write=False)
            object.__setattr__(self, "unconstrained", u)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @property
    def alpha_bar(self) -> np.ndarray:
        """prod_{s<=t} (1 - beta_s) for t = 1..T."""
        return np.cumprod(1.0 - self.beta)

    @property
    def gamma(self) -> np.ndarray:
        """Binomial name for the same cumulative product."""
        return self.alpha_bar

    def beta_at(self, t: int) -> float:
        _check_step(self, t, 1)
        return float(self.beta[t - 1])

    def cumulative_at(self, t: int) -> float:
        """alpha_bar_t (gamma_t); t = 0 gives 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    @classmethod
    def from_beta(cls, kind: DiffusionKind, beta) -> "Schedule":
        """Fixed schedule from an explicit rate sequence."""
        return cls(kind=kind, beta=np.asarray(beta, dtype=np.float64))

    def with_unconstrained(self, u: np.ndarray) -> "Schedule":
        """Learnable schedule with new parameters u_2..u_T (beta_1 untouched)."""
        if not self.learnable:
            raise UnsupportedOperationError("schedule is not learnable")
        u = np.asarray(u, dtype=np.float64)
        beta = np.concatenate([self.beta[:1], expit(u)])
        return Schedule(kind=self.kind, beta=beta, learnable=True, unconstrained=u)

    def beta_tensor(self, u=None):
        """
        beta as a function of the unconstrained parameters.

        Args:
            u: Tensor (or array) standing in for ``unconstrained``; ignored for
               fixed schedules

        Returns:
            The numpy rates for fixed schedules, otherwise a Tensor
            [beta_1, logistic(u_2), ..., logistic(u_T)]
        """
        if not self.learnable or u is None:
            return self.beta
        T = self.T
        embed = np.zeros((T, T - 1))
        embed[np.arange(1, T), np.arange(T - 1)] = 1.0
        head = np.zeros(T)
        head[0] = self.beta[0]
        return head + ad.einsum("ij,j->i", embed, ad.sigmoid(u))


def make_schedule(kind: DiffusionKind, T: int, beta1: float = 1e-4, mode: str = "fixed") -> Schedule:
    """
    Build a diffusion-rate schedule.

    Args:
        kind: "gaussian" or "binomial"
        T: number of diffusion steps
        beta1: frozen first rate of a learnable schedule
        mode: "fixed" for beta_t = 1 / (T - t + 1), "learnable" for the
              logistic family started at the fixed rule

    Returns:
        Schedule
    """
    if T < 1:
        raise InvalidArgumentError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta1 < 1.0:
        raise InvalidArgumentError(f"beta1 must lie in (0, 1), got {beta1}")
    if kind not in ("gaussian", "binomial"):
        raise InvalidArgumentError(f"unknown diffusion kind {kind!r}")

    t = np.arange(1, T + 1, dtype=np.float64)
    fixed = 1.0 / (T - t + 1.0)
    if mode == "fixed":
        return Schedule(kind=kind, beta=fixed)
    if mode != "learnable":
        raise InvalidArgumentError(f"unknown schedule mode {mode!r}")
    if kind == "binomial":
        raise UnsupportedOperationError("binomial diffusion rates cannot be learned with frozen noise")
    if T == 1:
        return Schedule(kind=kind, beta=np.array([beta1]), learnable=True, unconstrained=np.zeros(0))
    u = _np_logit(np.clip(fixed[1:], beta1, LEARNABLE_BETA_MAX))
    return Schedule(kind=kind, beta=np.concatenate([[beta1], expit(u)]), learnable=True, unconstrained=u)


def _check_step(schedule: Schedule, t: int, lowest: int) -> None:
    if not lowest <= t <= schedule.T:
        raise InvalidArgumentError(f"time step {t} outside [{lowest}, {schedule.T}]")


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagonalDistribution:
    """
    Factorized Gaussian (mean, variance) or Bernoulli (rate) over the last axis.

    Leading axes are batch axes; every reduction runs over the last one.
    """

    kind: DistributionKind
    mean: Optional[np.ndarray] = None
    variance: Optional[np.ndarray] = None
    rate: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "gaussian":
            mean = np.asarray(self.mean, dtype=np.float64)
            variance = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), mean.shape).copy()
            if not np.all(variance > 0.0):
                raise InvalidArgumentError("gaussian variances must be strictly positive")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "variance", variance)
        elif self.kind == "bernoulli":
            rate = np.asarray(self.rate, dtype=np.float64)
            if not np.all((rate >= 0.0) & (rate <= 1.0)):
                raise InvalidArgumentError("bernoulli rates must lie in [0, 1]")
            object.__setattr__(self, "rate", rate)
        else:
            raise InvalidArgumentError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def gaussian(cls, mean, variance) -> "DiagonalDistribution":
        return cls(kind="gaussian", mean=mean, variance=variance)

    @classmethod
    def bernoulli(cls, rate) -> "DiagonalDistribution":
        return cls(kind="bernoulli", rate=rate)

    @property
    def dim(self) -> int:
        return int((self.mean if self.kind == "gaussian" else self.rate).shape[-1])


@dataclass(frozen=True)
class DiffusionSpec:
    """A schedule, the data dimension and the equilibrium distribution pi."""

    schedule: Schedule
    dim: int
    equilibrium_rate: float = 0.5

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgumentError("data dimension must be positive")
        if not 0.0 < self.equilibrium_rate < 1.0:
            raise InvalidArgumentError("equilibrium rate must lie in (0, 1)")

    @property
    def kind(self) -> DiffusionKind:
        return self.schedule.kind

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def distribution_kind(self) -> DistributionKind:
        return "gaussian" if self.kind == "gaussian" else "bernoulli"

    @property
    def equilibrium(self) -> DiagonalDistribution:
        """pi: N(0, I) or independent Bernoulli(equilibrium_rate)."""
        if self.kind == "gaussian":
            return DiagonalDistribution.gaussian(np.zeros(self.dim), np.ones(self.dim))
        return DiagonalDistribution.bernoulli(np.full(self.dim, self.equilibrium_rate))

    def with_schedule(self, schedule: Schedule) -> "DiffusionSpec":
        return replace(self, schedule=schedule)


# ---------------------------------------------------------------------------
# Closed-form helpers (ndarray or Tensor)
# ---------------------------------------------------------------------------

def clamp_rate(rate):
    return ad.clip(rate, Config.RATE_EPS, 1.0 - Config.RATE_EPS)


def clamp_variance(variance):
    return ad.clip(variance, Config.VARIANCE_FLOOR, None)


def binomial_kernel_rate(x_prev, beta_t, p: float = 0.5):
    return x_prev * (1.0 - beta_t) + p * beta_t


def gaussian_marginal_moments(x0, alpha_bar_t):
    return ad.sqrt(alpha_bar_t) * x0, 1.0 - alpha_bar_t


def binomial_marginal_rate(x0, gamma_t, p: float = 0.5):
    return gamma_t * x0 + (1.0 - gamma_t) * p


def gaussian_posterior_moments(x0, xt, beta_t, alpha_bar_prev, alpha_bar_t):
    """Moments of q(x_{t-1} | x_t, x_0) for Gaussian diffusion."""
    denom = 1.0 - alpha_bar_t
    mean = (ad.sqrt(1.0 - beta_t) * (1.0 - alpha_bar_prev) * xt + ad.sqrt(alpha_bar_prev) * beta_t * x0) / denom
    variance = beta_t * (1.0 - alpha_bar_prev) / denom
    return mean, variance


def binomial_posterior_rate(x0, xt, beta_t, gamma_prev, p: float = 0.5):
    """q(x_{t-1} = 1 | x_t, x_0) per bit, by Bayes over x_{t-1} in {0, 1}."""
    prior_one = binomial_marginal_rate(x0, gamma_prev, p)
    rate_from_one = binomial_kernel_rate(1.0, beta_t, p)
    rate_from_zero = binomial_kernel_rate(0.0, beta_t, p)
    like_one = xt * rate_from_one + (1.0 - xt) * (1.0 - rate_from_one)
    like_zero = xt * rate_from_zero + (1.0 - xt) * (1.0 - rate_from_zero)
    joint_one = prior_one * like_one
    return joint_one / (joint_one + (1.0 - prior_one) * like_zero)


def gaussian_kl(mean_q, var_q, mean_p, var_p):
    """KL(N(mean_q, var_q) || N(mean_p, var_p)) summed over the last axis."""
    var_q = clamp_variance(var_q)
    var_p = clamp_variance(var_p)
    diff = mean_p - mean_q
    terms = var_q / var_p + diff * diff / var_p - 1.0 + ad.log(var_p) - ad.log(var_q)
    return 0.5 * ad.reduce_sum(terms, axis=-1)


def bernoulli_kl(rate_q, rate_p):
    """KL(Bernoulli(rate_q) || Bernoulli(rate_p)) summed over the last axis, 0 ln 0 = 0."""
    rate_p = clamp_rate(rate_p)
    cross = -(rate_q * ad.log(rate_p) + (1.0 - rate_q) * ad.log(1.0 - rate_p))
    return ad.reduce_sum(cross, axis=-1) - bernoulli_entropy(rate_q)


def gaussian_entropy(variance):
    return ad.reduce_sum(0.5 * (LOG_2PI + 1.0 + ad.log(clamp_variance(variance))), axis=-1)


def bernoulli_entropy(rate):
    if isinstance(rate, ad.Tensor):
        rate = clamp_rate(rate)
        return -ad.reduce_sum(rate * ad.log(rate) + (1.0 - rate) * ad.log(1.0 - rate), axis=-1)
    rate = np.asarray(rate, dtype=np.float64)
    return -np.sum(xlogy(rate, rate) + xlogy(1.0 - rate, 1.0 - rate), axis=-1)


def gaussian_log_prob(x, mean, variance):
    variance = clamp_variance(variance)
    diff = x - mean
    return -0.5 * ad.reduce_sum(LOG_2PI + ad.log(variance) + diff * diff / variance, axis=-1)


def bernoulli_log_prob(x, rate):
    rate = clamp_rate(rate)
    return ad.reduce_sum(x * ad.log(rate) + (1.0 - x) * ad.log(1.0 - rate), axis=-1)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def forward_step(spec: DiffusionSpec, x_prev: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw x_t ~ q(x_t | x_{t-1}).

    Args:
        spec: diffusion description
        x_prev: state x_{t-1}, shape [..., d]
        t: step index in [1, T]
        rng: explicit random generator

    Returns:
        A sample with the shape of ``x_prev``
    """
    _check_step(spec.schedule, t, 1)
    beta_t = spec.schedule.beta_at(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if spec.kind == "gaussian":
        return math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * rng.standard_normal(x_prev.shape)
    rate = binomial_kernel_rate(x_prev, beta_t, spec.equilibrium_rate)
    return (rng.random(x_prev.shape) < rate).astype(np.float64)


def forward_marginal(spec: DiffusionSpec, x0: np.ndarray, t: int) -> DiagonalDistribution:
    """q(x_t | x_0) in closed form."""
    _check_step(spec.schedule, t, 1)
    cumulative = spec.schedule.cumulative_at(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if spec.kind == "gaussian":
        mean, variance = gaussian_marginal_moments(x0, cumulative)
        return DiagonalDistribution.gaussian(mean, np.full(x0.shape, variance))
    return DiagonalDistribution.bernoulli(binomial_marginal_rate(x0, cumulative, spec.equilibrium_rate))


def forward_posterior(spec: DiffusionSpec, x0: np.ndarray, xt: np.ndarray, t: int) -> DiagonalDistribution:
    """
    q(x_{t-1} | x_t, x_0) in closed form.

    The t = 1 reverse step is fixed by the edge rule, so t starts at 2.
    """
    _check_step(spec.schedule, t, 2)
    schedule = spec.schedule
    beta_t = schedule.beta_at(t)
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if spec.kind == "gaussian":
        mean, variance = gaussian_posterior_moments(
            x0, xt, beta_t, schedule.cumulative_at(t - 1), schedule.cumulative_at(t))
        return DiagonalDistribution.gaussian(mean, np.full(mean.shape, variance))
    rate = binomial_posterior_rate(x0, xt, beta_t, schedule.cumulative_at(t - 1), spec.equilibrium_rate)
    return DiagonalDistribution.bernoulli(rate)


def _same_kind(q: DiagonalDistribution, p: DiagonalDistribution) -> None:
    if q.kind != p.kind:
        raise KindMismatchError(f"cannot compare a {q.kind} with a {p.kind} distribution")
    if q.dim != p.dim:
        raise InvalidArgumentError(f"dimension mismatch: {q.dim} vs {p.dim}")


def kl_divergence(q: DiagonalDistribution, p: DiagonalDistribution):
    """KL(q || p) in nats, one value per batch entry."""
    _same_kind(q, p)
    if q.kind == "gaussian":
        return gaussian_kl(q.mean, q.variance, p.mean, p.variance)
    return bernoulli_kl(q.rate, p.rate)


def entropy(dist: DiagonalDistribution):
    """Differential (Gaussian) or discrete (Bernoulli) entropy in nats."""
    if dist.kind == "gaussian":
        return gaussian_entropy(dist.variance)
    return bernoulli_entropy(dist.rate)


def cross_entropy(q: DiagonalDistribution, p: DiagonalDistribution):
    """-E_q[log p] in nats."""
    _same_kind(q, p)
    if q.kind == "gaussian":
        var_p = clamp_variance(p.variance)
        diff = q.mean - p.mean
        return 0.5 * np.sum(LOG_2PI + np.log(var_p) + (q.variance + diff * diff) / var_p, axis=-1)
    return entropy(q) + kl_divergence(q, p)


def log_prob(dist: DiagonalDistribution, x: np.ndarray):
    """log density (Gaussian) or log pmf (Bernoulli) of x, summed over dimensions."""
    x = np.asarray(x, dtype=np.float64)
    if dist.kind == "gaussian":
        return gaussian_log_prob(x, dist.mean, dist.variance)
    return bernoulli_log_prob(x, dist.rate)


def sample(dist: DiagonalDistribution, rng: np.random.Generator) -> np.ndarray:
    """One draw per batch entry."""
    if dist.kind == "gaussian":
        return dist.mean + np.sqrt(dist.variance) * rng.standard_normal(dist.mean.shape)
    return (rng.random(dist.rate.shape) < dist.rate).astype(np.float64)
