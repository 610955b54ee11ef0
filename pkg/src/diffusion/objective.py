"""
The lower bound K on the log likelihood, and training by gradient ascent on it.

K is assembled from closed-form pieces: one analytic KL divergence per reverse
step t = 2..T, the conditional entropies of the forward process at t = 1 and
t = T, the cross entropy of q(x_T | x_0) against pi, and the exact t = 1 edge
term. Only the outer expectation over q(x_t | x_0) is sampled.

Gaussian trajectories are built from frozen noise, which turns the schedule
into a differentiable input; binomial states are sampled directly.
"""

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from src.config import Config, TrainConfig
from src.diffusion import autodiff as ad
from src.diffusion.approximators import ParameterVector, ReverseModel, Tensors, evaluate_with_gradients
from src.diffusion.kernels import (
    LOG_2PI,
    DiagonalDistribution,
    DiffusionSpec,
    bernoulli_entropy,
    bernoulli_kl,
    binomial_kernel_rate,
    binomial_marginal_rate,
    binomial_posterior_rate,
    forward_marginal,
    gaussian_kl,
    gaussian_posterior_moments,
    log_prob,
    sample,
)
from src.errors import (
    InvalidArgumentError,
    KindMismatchError,
    NonFiniteError,
    TrainingDivergedError,
    UnsupportedOperationError,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Edge rule and frozen noise
# ---------------------------------------------------------------------------

def edge_reverse_kernel(spec: DiffusionSpec, x1: np.ndarray) -> DiagonalDistribution:
    """
    The fixed final reverse step p(x_0 | x_1).

    It is the forward kernel at rate beta_1 read backwards: N(sqrt(1 - beta_1) x_1,
    beta_1 I) or Bernoulli(x_1 (1 - beta_1) + p beta_1). Never trained.
    """
    beta1 = spec.schedule.beta_at(1)
    x1 = np.asarray(x1, dtype=np.float64)
    if spec.kind == "gaussian":
        return DiagonalDistribution.gaussian(math.sqrt(1.0 - beta1) * x1, np.full(x1.shape, beta1))
    return DiagonalDistribution.bernoulli(binomial_kernel_rate(x1, beta1, spec.equilibrium_rate))


@dataclass(frozen=True)
class FrozenNoise:
    """Standard normal draws eps_1..eps_T, shape [T, ..., d], for one x_0 batch."""

    eps: np.ndarray

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=np.float64).copy()
        eps.setflags(write=False)
        object.__setattr__(self, "eps", eps)

    @property
    def T(self) -> int:
        return int(self.eps.shape[0])

    @classmethod
    def draw(cls, rng: np.random.Generator, T: int, shape: Tuple[int, ...]) -> "FrozenNoise":
        return cls(rng.standard_normal((T,) + tuple(shape)))


def _trajectory(x0, eps: np.ndarray, beta) -> List:
    """x_1..x_T from x_0, noise and rates; Tensor states when beta is a Tensor."""
    states = []
    x = x0
    for t in range(eps.shape[0]):
        beta_t = beta[t]
        x = ad.sqrt(1.0 - beta_t) * x + ad.sqrt(beta_t) * eps[t]
        states.append(x)
    return states


def frozen_noise_trajectory(spec: DiffusionSpec, x0: np.ndarray, noise: FrozenNoise) -> np.ndarray:
    """
    Deterministic forward trajectory x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps_t.

    Args:
        spec: Gaussian diffusion description
        x0: start state [..., d]
        noise: frozen draws with leading axis T

    Returns:
        States x_1..x_T stacked on a leading axis
    """
    if spec.kind != "gaussian":
        raise UnsupportedOperationError("frozen-noise trajectories exist for gaussian diffusion only")
    x0 = np.asarray(x0, dtype=np.float64)
    if noise.T != spec.T or noise.eps.shape[1:] != x0.shape:
        raise InvalidArgumentError(f"noise of shape {noise.eps.shape} does not fit T={spec.T}, x0 {x0.shape}")
    return np.stack(_trajectory(x0, noise.eps, spec.schedule.beta))


# ---------------------------------------------------------------------------
# Bound pieces (ndarray or Tensor)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundDraws:
    """
    Everything random in one bound evaluation, fixed ahead of time.

    ``steps`` are the evaluated t values (>= 2) and ``weight`` rescales their
    KL sum to the full t = 2..T range. Gaussian draws carry frozen noise,
    binomial draws carry the sampled states x_t for each step, shape [S, B, d].
    """

    steps: np.ndarray
    weight: float
    noise: Optional[FrozenNoise] = None
    states: Optional[np.ndarray] = None


def draw_bound_inputs(spec: DiffusionSpec, x0: np.ndarray, rng: Optional[np.random.Generator] = None,
                      t_subsample: int = 0, noise: Optional[FrozenNoise] = None) -> BoundDraws:
    """
    Fix the random inputs of the bound for one batch.

    Args:
        spec: diffusion description
        x0: data batch [B, d]
        rng: generator for the noise, the states and the t subset
        t_subsample: number of distinct t values to keep (0 = all of 2..T)
        noise: frozen Gaussian noise to reuse instead of drawing new noise

    Returns:
        BoundDraws
    """
    T = spec.T
    every = np.arange(2, T + 1)
    if noise is None and rng is None:
        raise InvalidArgumentError("bound inputs need a random generator or frozen noise")
    if 0 < t_subsample < every.size:
        if rng is None:
            raise InvalidArgumentError("t subsampling needs a random generator")
        steps = np.sort(rng.choice(every, size=t_subsample, replace=False))
    else:
        steps = every
    weight = (T - 1) / steps.size if steps.size else 0.0

    if spec.kind == "gaussian":
        if noise is None:
            noise = FrozenNoise.draw(rng, T, x0.shape)
        if noise.T != T or noise.eps.shape[1:] != x0.shape:
            raise InvalidArgumentError(f"noise of shape {noise.eps.shape} does not fit T={T}, batch {x0.shape}")
        return BoundDraws(steps=steps, weight=weight, noise=noise)

    if noise is not None:
        raise UnsupportedOperationError("binomial diffusion has no frozen-noise trajectories")
    states = np.stack([sample(forward_marginal(spec, x0, int(t)), rng) for t in steps]) if steps.size \
        else np.zeros((0,) + x0.shape)
    return BoundDraws(steps=steps, weight=weight, states=states)


def _schedule_terms(spec: DiffusionSpec, u=None):
    """beta, alpha_bar and alpha_bar shifted by one step, as arrays or (learned) Tensors."""
    schedule = spec.schedule
    if u is None or not schedule.learnable:
        alpha_bar = schedule.alpha_bar
        return schedule.beta, alpha_bar, np.concatenate([[1.0], alpha_bar[:-1]])
    beta = schedule.beta_tensor(u)
    log_keep = ad.log(1.0 - beta)
    cumulative = ad.cumsum(log_keep)
    return beta, ad.exp(cumulative), ad.exp(cumulative - log_keep)


def _states_at(spec: DiffusionSpec, x0: np.ndarray, draws: BoundDraws, beta, steps: np.ndarray):
    if spec.kind == "binomial":
        index = np.searchsorted(draws.steps, steps)
        return draws.states[index]
    trajectory = _trajectory(x0, draws.noise.eps, beta)
    return ad.stack([trajectory[t - 1] for t in steps])


def _kl_block(spec: DiffusionSpec, model: ReverseModel, tensors: Tensors, x0: np.ndarray,
              xt, steps: np.ndarray, beta, alpha_bar, alpha_bar_prev):
    """KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t)) for every step in ``steps``, shape [S, B]."""
    S = steps.shape[0]
    index = steps - 1
    beta_s = ad.take(beta, index, axis=0).reshape(S, 1, 1)
    prev_s = ad.take(alpha_bar_prev, index, axis=0).reshape(S, 1, 1)
    if spec.kind == "gaussian":
        now_s = ad.take(alpha_bar, index, axis=0).reshape(S, 1, 1)
        mean_q, var_q = gaussian_posterior_moments(x0, xt, beta_s, prev_s, now_s)
        mean_p, var_p = model.kernel(tensors, xt, steps, beta)
        return gaussian_kl(mean_q, var_q, mean_p, var_p)
    rate_q = binomial_posterior_rate(x0, xt, beta_s, prev_s, spec.equilibrium_rate)
    rate_p = model.kernel(tensors, xt, steps, beta)
    return bernoulli_kl(rate_q, rate_p)


def _boundary_terms(spec: DiffusionSpec, x0: np.ndarray, alpha_bar):
    """
    Per-datum H_q(x_T | x_0), H_q(x_1 | x_0), cross entropy of q(x_T | x_0)
    against pi, and the edge term log pi(x_0) - E log pi(x_1).
    """
    d = spec.dim
    first = alpha_bar[0]
    last = alpha_bar[spec.T - 1]
    if spec.kind == "gaussian":
        square = np.sum(x0 * x0, axis=-1)
        entropy_T = 0.5 * d * (LOG_2PI + 1.0 + ad.log(1.0 - last))
        entropy_1 = 0.5 * d * (LOG_2PI + 1.0 + ad.log(1.0 - first))
        cross_T = 0.5 * (d * (LOG_2PI + 1.0 - last) + last * square)
        edge = 0.5 * (1.0 - first) * (d - square)
        return entropy_T, entropy_1, cross_T, edge
    p = spec.equilibrium_rate
    log_odds = math.log(p) - math.log(1.0 - p)
    rate_1 = binomial_marginal_rate(x0, first, p)
    rate_T = binomial_marginal_rate(x0, last, p)
    cross_T = -np.sum(rate_T * math.log(p) + (1.0 - rate_T) * math.log(1.0 - p), axis=-1)
    edge = np.sum(x0 - rate_1, axis=-1) * log_odds
    return bernoulli_entropy(rate_T), bernoulli_entropy(rate_1), cross_T, edge


def _check_model(spec: DiffusionSpec, model: ReverseModel) -> None:
    if model.output_kind != spec.distribution_kind:
        raise KindMismatchError(f"{model.architecture} model cannot drive {spec.kind} diffusion")
    if model.spec.dim != spec.dim or model.spec.T != spec.T:
        raise InvalidArgumentError("model was built for a different dimension or trajectory length")


def _as_batch(spec: DiffusionSpec, x0) -> np.ndarray:
    x0 = np.asarray(getattr(x0, "values", x0), dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if x0.ndim != 2 or x0.shape[1] != spec.dim:
        raise InvalidArgumentError(f"expected a batch of shape [B, {spec.dim}], got {x0.shape}")
    return x0


# ---------------------------------------------------------------------------
# Evaluated bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundBreakdown:
    """
    K and its pieces, averaged over a batch, in nats per datum.

    ``kl_terms[i]`` is the batch-mean KL at ``steps[i]``; with t subsampling
    the KL sum entering ``total`` is ``kl_weight * kl_terms.sum()``.
    """

    steps: np.ndarray
    kl_terms: np.ndarray
    kl_weight: float
    entropy_T: float
    entropy_1: float
    cross_entropy_T: float
    edge_term: float
    total: float
    stderr: float
    batch_size: int

    @property
    def kl_sum(self) -> float:
        return float(self.kl_weight * np.sum(self.kl_terms))

    @property
    def total_bits(self) -> float:
        return Config.bits(self.total)

    @property
    def stderr_bits(self) -> float:
        return Config.bits(self.stderr)

    def as_dict(self) -> Dict[str, object]:
        return {
            "total_nats": self.total,
            "total_bits": self.total_bits,
            "stderr_nats": self.stderr,
            "stderr_bits": self.stderr_bits,
            "kl_sum_nats": self.kl_sum,
            "entropy_T_nats": self.entropy_T,
            "entropy_1_nats": self.entropy_1,
            "cross_entropy_T_nats": self.cross_entropy_T,
            "edge_term_nats": self.edge_term,
            "evaluated_steps": int(self.steps.size),
            "batch_size": self.batch_size,
        }


def bound_terms(spec: DiffusionSpec, model: ReverseModel, x0_batch,
                source: Union[np.random.Generator, FrozenNoise], t_subsample: int = 0) -> BoundBreakdown:
    """
    Evaluate K on a batch.

    Args:
        spec: diffusion description (its schedule is the one evaluated)
        model: reverse model of the matching kind
        x0_batch: data [B, d] (or a Dataset)
        source: random generator, or frozen noise for a reproducible Gaussian bound
        t_subsample: number of t values to evaluate (0 = all of 2..T)

    Returns:
        BoundBreakdown
    """
    _check_model(spec, model)
    x0 = _as_batch(spec, x0_batch)
    if isinstance(source, FrozenNoise):
        draws = draw_bound_inputs(spec, x0, None, t_subsample, noise=source)
    else:
        draws = draw_bound_inputs(spec, x0, source, t_subsample)

    tensors = model.params.as_constants()
    beta, alpha_bar, alpha_bar_prev = _schedule_terms(spec)
    if spec.kind == "gaussian":
        states = np.stack(_trajectory(x0, draws.noise.eps, beta))

    per_step = np.zeros((draws.steps.size, x0.shape[0]))
    chunk = max(1, Config.EVAL_CHUNK)
    for start in range(0, draws.steps.size, chunk):
        steps = draws.steps[start:start + chunk]
        xt = states[steps - 1] if spec.kind == "gaussian" else draws.states[start:start + chunk]
        kl = ad.value_of(_kl_block(spec, model, tensors, x0, xt, steps, beta, alpha_bar, alpha_bar_prev))
        bad = ~np.isfinite(kl).all(axis=1)
        if bad.any():
            t = int(steps[np.argmax(bad)])
            raise NonFiniteError(f"non-finite KL term at t={t}", node=f"kl[t={t}]")
        per_step[start:start + chunk] = kl

    entropy_T, entropy_1, cross_T, edge = (np.broadcast_to(np.asarray(v, dtype=np.float64), (x0.shape[0],))
                                           for v in _boundary_terms(spec, x0, alpha_bar))
    per_datum = -draws.weight * per_step.sum(axis=0) + entropy_T - entropy_1 - cross_T + edge
    if not np.isfinite(per_datum).all():
        raise NonFiniteError("non-finite boundary term in the bound", node="boundary")
    B = x0.shape[0]
    stderr = float(np.std(per_datum, ddof=1) / math.sqrt(B)) if B > 1 else 0.0
    return BoundBreakdown(
        steps=draws.steps,
        kl_terms=per_step.mean(axis=1),
        kl_weight=draws.weight,
        entropy_T=float(entropy_T.mean()),
        entropy_1=float(entropy_1.mean()),
        cross_entropy_T=float(cross_T.mean()),
        edge_term=float(edge.mean()),
        total=float(per_datum.mean()),
        stderr=stderr,
        batch_size=B,
    )


# ---------------------------------------------------------------------------
# Differentiable bound
# ---------------------------------------------------------------------------

def bound_parameters(spec: DiffusionSpec, model: ReverseModel, learn_schedule: bool = True) -> ParameterVector:
    """Model parameters under 'model/' plus 'schedule/u' when the schedule is learned."""
    parts = {"model": model.params}
    if learn_schedule and spec.schedule.learnable:
        parts["schedule"] = ParameterVector.from_arrays({"u": spec.schedule.unconstrained})
    return ParameterVector.merge(parts)


def bound_objective(spec: DiffusionSpec, model: ReverseModel, x0: np.ndarray,
                    draws: BoundDraws) -> Callable[[Tensors], object]:
    """
    Batch-mean K (nats) as a function of the tensors of ``bound_parameters``.

    The draws stay fixed, so repeated calls are deterministic.
    """
    _check_model(spec, model)
    x0 = _as_batch(spec, x0)

    def objective(tensors: Tensors):
        model_tensors = {name[len("model/"):]: value for name, value in tensors.items()
                         if name.startswith("model/")}
        beta, alpha_bar, alpha_bar_prev = _schedule_terms(spec, tensors.get("schedule/u"))
        per_datum = 0.0
        if draws.steps.size:
            xt = _states_at(spec, x0, draws, beta, draws.steps)
            kl = _kl_block(spec, model, model_tensors, x0, xt, draws.steps, beta, alpha_bar, alpha_bar_prev)
            per_datum = -draws.weight * ad.reduce_sum(kl, axis=0)
        entropy_T, entropy_1, cross_T, edge = _boundary_terms(spec, x0, alpha_bar)
        per_datum = per_datum + entropy_T - entropy_1 - cross_T + edge
        if isinstance(per_datum, ad.Tensor):
            return per_datum.mean() if per_datum.shape else per_datum
        return float(np.mean(per_datum))

    return objective


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class LogRow(NamedTuple):
    step: int
    wall_seconds: float
    k_bits: float
    grad_norm: float


@dataclass
class TrainingLog:
    """Rows of (step, wall seconds, K in bits, gradient norm)."""

    rows: List[LogRow] = field(default_factory=list)

    HEADER = ("step", "wall_seconds", "k_bits", "grad_norm")

    def record(self, step: int, wall_seconds: float, k_bits: float, grad_norm: float) -> None:
        self.rows.append(LogRow(int(step), float(wall_seconds), float(k_bits), float(grad_norm)))

    @property
    def final_k_bits(self) -> Optional[float]:
        return self.rows[-1].k_bits if self.rows else None

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.HEADER)
        for row in self.rows:
            writer.writerow([row.step, f"{row.wall_seconds:.3f}", repr(row.k_bits), repr(row.grad_norm)])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != cls.HEADER:
            raise InvalidArgumentError(f"training log header must be {','.join(cls.HEADER)}")
        log = cls()
        for line in reader:
            if line:
                log.record(int(line[0]), float(line[1]), float(line[2]), float(line[3]))
        return log

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: Path) -> "TrainingLog":
        return cls.from_csv(Path(path).read_text())


CheckpointHook = Callable[[int, ReverseModel, TrainingLog], None]


def _apply_bundle(spec: DiffusionSpec, model: ReverseModel, bundle: ParameterVector) -> ReverseModel:
    if "schedule/u" in bundle:
        spec = spec.with_schedule(spec.schedule.with_unconstrained(bundle["schedule/u"]))
    return model.with_parameters(bundle.part("model")).with_spec(spec)


def train(spec: DiffusionSpec, model: ReverseModel, dataset, config: TrainConfig,
          on_checkpoint: Optional[CheckpointHook] = None) -> Tuple[ReverseModel, TrainingLog]:
    """
    Maximize K by minibatch gradient ascent with RMSprop step scaling.

    Args:
        spec: diffusion description; a learnable schedule is trained along
              with the model when ``config.learn_schedule`` is set
        model: initial reverse model
        dataset: training data [n, d] (or a Dataset)
        config: optimizer settings
        on_checkpoint: called with (step, model, log) every
                       ``config.checkpoint_every`` steps

    Returns:
        (trained model carrying the trained spec, training log)
    """
    _check_model(spec, model)
    data = _as_batch(spec, dataset)
    if spec.kind == "gaussian":
        pooled = float(np.mean((data - data.mean(axis=0)) ** 2))
        if abs(pooled - 1.0) > Config.VARIANCE_TOLERANCE:
            logger.warning("training data has pooled variance %.3f; gaussian diffusion expects 1", pooled)

    rng = np.random.default_rng(config.seed)
    learn_schedule = config.learn_schedule and spec.schedule.learnable
    model = model.with_spec(spec)
    bundle = bound_parameters(spec, model, learn_schedule)
    mean_square = np.zeros(len(bundle))
    log = TrainingLog()
    n = data.shape[0]
    started = time.perf_counter()
    logger.info("training %s model: %d parameters, %d steps, batch %d",
                model.architecture, len(bundle), config.steps, config.batch_size)

    for step in range(config.steps):
        batch = data[rng.choice(n, size=config.batch_size, replace=n < config.batch_size)]
        current = model.spec
        draws = draw_bound_inputs(current, batch, rng, config.t_subsample)
        try:
            value, grad = evaluate_with_gradients(bundle, bound_objective(current, model, batch, draws))
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"bound diverged at step {step + 1}: {exc}",
                                        last_good=model, log=log, step=step + 1) from exc

        mean_square = config.rms_decay * mean_square + (1.0 - config.rms_decay) * grad.values ** 2
        rate = config.learning_rate_at(step)
        values = bundle.values + rate * grad.values / (np.sqrt(mean_square) + config.rms_epsilon)
        if not np.isfinite(values).all():
            raise TrainingDivergedError(f"parameters became non-finite at step {step + 1}",
                                        last_good=model, log=log, step=step + 1)
        bundle = bundle.with_values(values)
        model = _apply_bundle(current, model, bundle)

        done = step + 1
        if done % config.log_every == 0 or done == config.steps:
            grad_norm = float(np.linalg.norm(grad.values))
            log.record(done, time.perf_counter() - started, Config.bits(value), grad_norm)
            logger.info("step %d: K %.4f bits, |grad| %.3e", done, Config.bits(value), grad_norm)
        if on_checkpoint is not None and done % config.checkpoint_every == 0:
            on_checkpoint(done, model, log)

    return model, log


def null_baseline(spec: DiffusionSpec, dataset) -> float:
    """Mean log pi(x_0) over the data, in bits."""
    data = _as_batch(spec, dataset)
    return Config.bits(float(np.mean(log_prob(spec.equilibrium, data))))
