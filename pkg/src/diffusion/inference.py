"""
Sampling from the reverse process and scoring data under it.

* ``sample_reverse`` runs the generative chain x_T ~ pi, ..., x_0.
* ``estimate_log_likelihood`` averages p(x_0..T) / q(x_1..T | x_0) over forward
  trajectories (log-mean-exp with a max shift).
* ``entropy_bounds`` gives the closed-form bounds on H_q(x_{t-1} | x_t).
* ``energy_distance`` compares two samples; used to judge generated data.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from src.config import Config
from src.diffusion.approximators import ReverseModel, reverse_apply
from src.diffusion.kernels import (
    LOG_2PI,
    DiagonalDistribution,
    DiffusionSpec,
    bernoulli_entropy,
    binomial_kernel_rate,
    binomial_marginal_rate,
    log_prob,
    sample,
)
from src.diffusion.objective import edge_reverse_kernel
from src.errors import InvalidArgumentError, NonFiniteError, UnsupportedOperationError

logger = logging.getLogger(__name__)


def draw_equilibrium(spec: DiffusionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws from pi, shape [n, d]."""
    if spec.kind == "gaussian":
        return rng.standard_normal((n, spec.dim))
    return (rng.random((n, spec.dim)) < spec.equilibrium_rate).astype(np.float64)


def forward_kernel(spec: DiffusionSpec, x_prev: np.ndarray, t: int) -> DiagonalDistribution:
    """q(x_t | x_{t-1}) as a distribution, for scoring."""
    beta_t = spec.schedule.beta_at(t)
    if spec.kind == "gaussian":
        return DiagonalDistribution.gaussian(math.sqrt(1.0 - beta_t) * x_prev, np.full(x_prev.shape, beta_t))
    return DiagonalDistribution.bernoulli(binomial_kernel_rate(x_prev, beta_t, spec.equilibrium_rate))


def reverse_kernel(spec: DiffusionSpec, model: ReverseModel, x_t: np.ndarray, t: int) -> DiagonalDistribution:
    """p(x_{t-1} | x_t): the model for t >= 2, the edge rule at t = 1."""
    if t == 1:
        return edge_reverse_kernel(spec, x_t)
    return reverse_apply(model, x_t, t)


# ---------------------------------------------------------------------------
# Reverse sampling
# ---------------------------------------------------------------------------

def sample_reverse(spec: DiffusionSpec, model: ReverseModel, n: int, rng: np.random.Generator,
                   keep_intermediate: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """
    Draw n samples from the generative process.

    Args:
        spec: diffusion description
        model: reverse model
        n: number of samples
        rng: explicit random generator
        keep_intermediate: also return every state

    Returns:
        x_0 samples [n, d], or (samples, frames) where frames[k] holds x_{T-k}
        for k = 0..T
    """
    if n < 1:
        raise InvalidArgumentError(f"sample count must be positive, got {n}")
    x = draw_equilibrium(spec, n, rng)
    frames = [x] if keep_intermediate else None
    for t in range(spec.T, 0, -1):
        x = sample(reverse_kernel(spec, model, x, t), rng)
        if frames is not None:
            frames.append(x)
    if frames is not None:
        return x, np.stack(frames)
    return x


# ---------------------------------------------------------------------------
# Forward trajectories and importance weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRecord:
    """
    Forward trajectories scored under both processes.

    ``states[k]`` is x_{T-k} for every trajectory, ``log_p[:, t - 1]`` is
    log p(x_{t-1} | x_t) and ``log_q[:, t - 1]`` is log q(x_t | x_{t-1}).
    """

    states: np.ndarray
    log_p: np.ndarray
    log_q: np.ndarray
    log_prior: np.ndarray
    seed: Optional[int] = None

    @property
    def T(self) -> int:
        return int(self.log_p.shape[1])

    @property
    def log_weights(self) -> np.ndarray:
        """log p(x_0..T) - log q(x_1..T | x_0) per trajectory."""
        return self.log_prior + np.sum(self.log_p - self.log_q, axis=1)


def _forward_scores(spec: DiffusionSpec, model: ReverseModel, x0: np.ndarray,
                    rng: np.random.Generator) -> Iterator[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    """Walk one forward trajectory per row of x0, yielding (t, x_t, log p, log q) per step."""
    x_prev = x0
    for t in range(1, spec.T + 1):
        q_step = forward_kernel(spec, x_prev, t)
        x_t = sample(q_step, rng)
        lq = log_prob(q_step, x_t)
        lp = log_prob(reverse_kernel(spec, model, x_t, t), x_prev)
        yield t, x_t, lp, lq
        x_prev = x_t


def _rows(spec: DiffusionSpec, x0: np.ndarray, n_traj: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != spec.dim:
        raise InvalidArgumentError(f"datum has dimension {x0.shape[-1]}, expected {spec.dim}")
    if n_traj < 1:
        raise InvalidArgumentError(f"n_traj must be at least 1, got {n_traj}")
    return np.repeat(x0.reshape(-1, spec.dim), n_traj, axis=0)


def score_forward_trajectories(spec: DiffusionSpec, model: ReverseModel, x0: np.ndarray, n_traj: int,
                               rng: np.random.Generator, seed: Optional[int] = None) -> TrajectoryRecord:
    """Sample n_traj forward trajectories from one datum and keep every state and score."""
    rows = _rows(spec, x0, n_traj)
    states = [rows]
    log_p = np.zeros((n_traj, spec.T))
    log_q = np.zeros((n_traj, spec.T))
    for t, x_t, lp, lq in _forward_scores(spec, model, rows, rng):
        states.append(x_t)
        log_p[:, t - 1] = lp
        log_q[:, t - 1] = lq
    log_prior = log_prob(spec.equilibrium, states[-1])
    return TrajectoryRecord(states=np.stack(states[::-1]), log_p=log_p, log_q=log_q,
                            log_prior=log_prior, seed=seed)


def _log_mean_exp(weights: np.ndarray) -> Tuple[float, float]:
    """Log of the mean of exp(weights) and its delta-method standard error."""
    n = weights.size
    if not np.isfinite(weights).any():
        raise NonFiniteError("every importance weight is -inf; the model assigns zero density",
                             node="importance_weights")
    estimate = float(logsumexp(weights) - math.log(n))
    if n < 2:
        return estimate, float("nan")
    ratios = np.exp(weights - weights.max())
    stderr = float(np.std(ratios, ddof=1) / (math.sqrt(n) * ratios.mean()))
    return estimate, stderr


def estimate_log_likelihood(spec: DiffusionSpec, model: ReverseModel, x0: np.ndarray, n_traj: int,
                            rng: np.random.Generator) -> Tuple[float, float]:
    """
    Importance-sampled log p(x_0) in nats.

    Args:
        spec: diffusion description
        model: reverse model
        x0: one datum [d]
        n_traj: number of forward trajectories
        rng: explicit random generator

    Returns:
        (estimate, standard error); the error is NaN for a single trajectory
    """
    rows = _rows(spec, x0, n_traj)
    weights = np.zeros(n_traj)
    x_last = rows
    for _, x_t, lp, lq in _forward_scores(spec, model, rows, rng):
        weights += lp - lq
        x_last = x_t
    weights += log_prob(spec.equilibrium, x_last)
    return _log_mean_exp(weights)


@dataclass(frozen=True)
class LikelihoodSummary:
    """Per-datum importance estimates over a batch, in nats."""

    per_datum: np.ndarray
    n_traj: int

    @property
    def mean(self) -> float:
        return float(self.per_datum.mean())

    @property
    def stderr(self) -> float:
        n = self.per_datum.size
        return float(np.std(self.per_datum, ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def estimate_batch_log_likelihood(spec: DiffusionSpec, model: ReverseModel, x0_batch: np.ndarray, n_traj: int,
                                  rng: np.random.Generator) -> LikelihoodSummary:
    """``estimate_log_likelihood`` for every row of a batch, sharing one pass over t."""
    batch = np.asarray(x0_batch, dtype=np.float64).reshape(-1, spec.dim)
    rows = _rows(spec, batch, n_traj)
    weights = np.zeros(rows.shape[0])
    x_last = rows
    for _, x_t, lp, lq in _forward_scores(spec, model, rows, rng):
        weights += lp - lq
        x_last = x_t
    weights += log_prob(spec.equilibrium, x_last)
    per_datum = np.array([_log_mean_exp(w)[0] for w in weights.reshape(batch.shape[0], n_traj)])
    logger.debug("importance estimate over %d data, %d trajectories each", batch.shape[0], n_traj)
    return LikelihoodSummary(per_datum=per_datum, n_traj=n_traj)


# ---------------------------------------------------------------------------
# Entropy bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EntropyBoundReport:
    """Bounds on H_q(x_{t-1} | x_t) in nats."""

    t: int
    upper: float
    lower: float

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def _binary_entropy(rate: float) -> float:
    return float(bernoulli_entropy(np.array([rate])))


def entropy_bounds(spec: DiffusionSpec, t: int, x0_batch: np.ndarray) -> EntropyBoundReport:
    """
    Upper H_q(x_t | x_{t-1}) and lower upper + H_q(x_{t-1} | x_0) - H_q(x_t | x_0).

    Gaussian data must have pooled variance 1 (within Config.VARIANCE_TOLERANCE);
    binomial bounds need the uniform equilibrium p = 0.5. Both conditions make
    the marginal entropy nondecreasing in t, which the upper bound relies on.
    """
    schedule = spec.schedule
    if not 2 <= t <= spec.T:
        raise InvalidArgumentError(f"time step {t} outside [2, {spec.T}]")
    x0 = np.asarray(x0_batch, dtype=np.float64).reshape(-1, spec.dim)
    d = spec.dim
    beta_t = schedule.beta_at(t)
    prev, now = schedule.cumulative_at(t - 1), schedule.cumulative_at(t)

    if spec.kind == "gaussian":
        pooled = float(np.mean((x0 - x0.mean(axis=0)) ** 2))
        if abs(pooled - 1.0) > Config.VARIANCE_TOLERANCE:
            raise InvalidArgumentError(f"entropy bounds need variance-1 data, pooled variance is {pooled:.4f}")
        upper = 0.5 * d * (LOG_2PI + 1.0 + math.log(beta_t))
        lower = upper + 0.5 * d * (math.log(1.0 - prev) - math.log(1.0 - now))
        return EntropyBoundReport(t=t, upper=upper, lower=lower)

    p = spec.equilibrium_rate
    if p != 0.5:
        raise UnsupportedOperationError("binomial entropy bounds need the uniform equilibrium p = 0.5")
    on = np.mean(binomial_marginal_rate(x0, prev, p), axis=0)
    upper = float(np.sum(on * _binary_entropy(binomial_kernel_rate(1.0, beta_t, p))
                         + (1.0 - on) * _binary_entropy(binomial_kernel_rate(0.0, beta_t, p))))
    h_prev = float(np.mean(bernoulli_entropy(binomial_marginal_rate(x0, prev, p))))
    h_now = float(np.mean(bernoulli_entropy(binomial_marginal_rate(x0, now, p))))
    return EntropyBoundReport(t=t, upper=upper, lower=upper + h_prev - h_now)


# ---------------------------------------------------------------------------
# Sample comparison
# ---------------------------------------------------------------------------

def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample energy distance 2E|a - b| - E|a - a'| - E|b - b'| (within terms exclude self pairs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InvalidArgumentError("energy distance needs at least two points per sample")
    n, m = a.shape[0], b.shape[0]
    cross = cdist(a, b).mean()
    within_a = cdist(a, a).sum() / (n * (n - 1))
    within_b = cdist(b, b).sum() / (m * (m - 1))
    return float(2.0 * cross - within_a - within_b)


def energy_distance_null(data: np.ndarray, n: int, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Energy distances between disjoint size-n halves of the data, one per draw."""
    data = np.asarray(data, dtype=np.float64)
    if 2 * n > data.shape[0]:
        raise InvalidArgumentError(f"need at least {2 * n} points for two disjoint samples of {n}")
    null = np.empty(draws)
    for i in range(draws):
        picked = rng.permutation(data.shape[0])[:2 * n]
        null[i] = energy_distance(data[picked[:n]], data[picked[n:]])
    return null
