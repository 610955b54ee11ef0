"""
Reverse-kernel function families and their gradients.

Two toy architectures produce the parameters of p(x_{t-1} | x_t):

* ``RbfReverseModel``: a normalized radial basis network (Gaussian diffusion)
  producing f_mu and a diagonal f_Sigma.
* ``MlpReverseModel``: a sigmoid multilayer perceptron (binomial diffusion)
  producing Bernoulli rates f_b.

Hidden layers are shared across time steps. The readout is either one row per
time step or a softmax-normalized mixture of Gaussian bumps over t.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, ClassVar, Dict, Iterator, Tuple, Union

import numpy as np
from scipy.special import logit as _np_logit

from src.diffusion import autodiff as ad
from src.diffusion.autodiff import Tensor
from src.diffusion.kernels import DiagonalDistribution, DiffusionSpec, clamp_rate
from src.errors import InvalidArgumentError, KindMismatchError, NonFiniteError

logger = logging.getLogger(__name__)

Tensors = Dict[str, Tensor]
Objective = Callable[[Tensors], Union[Tensor, float]]


# ---------------------------------------------------------------------------
# Flat parameter storage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterVector:
    """
    Flat float64 parameters with a named layout.

    ``layout`` maps each name to (offset, shape); the entries tile ``values``
    exactly once, in insertion order.
    """

    values: np.ndarray
    layout: Dict[str, Tuple[int, Tuple[int, ...]]]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        cursor = 0
        for name, (offset, shape) in self.layout.items():
            if offset != cursor:
                raise InvalidArgumentError(f"layout entry {name!r} does not start at offset {cursor}")
            cursor += int(np.prod(shape, dtype=np.int64))
        if cursor != values.size:
            raise InvalidArgumentError(f"layout covers {cursor} values, vector holds {values.size}")

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParameterVector":
        layout: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        chunks = []
        offset = 0
        for name, array in arrays.items():
            array = np.asarray(array, dtype=np.float64)
            layout[name] = (offset, tuple(array.shape))
            chunks.append(array.ravel())
            offset += array.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values=values, layout=layout)

    def __len__(self) -> int:
        return int(self.values.size)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[offset:offset + size].reshape(shape)

    def names(self) -> Iterator[str]:
        return iter(self.layout)

    def unflatten(self) -> Dict[str, np.ndarray]:
        return {name: self[name] for name in self.layout}

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise InvalidArgumentError(f"expected {self.values.size} values, got {values.size}")
        return ParameterVector(values=values, layout=dict(self.layout))

    def as_tensors(self) -> Tensors:
        """Fresh variable leaves, one per named array."""
        return {name: ad.variable(np.array(self[name]), name=name) for name in self.layout}

    def as_constants(self) -> Tensors:
        return {name: Tensor(self[name], op="param", name=name) for name in self.layout}

    def gradient_from(self, tensors: Tensors) -> "ParameterVector":
        """Collect ``.grad`` of the leaves produced by ``as_tensors`` in layout order."""
        grads = {}
        for name in self.layout:
            grad = tensors[name].grad
            grads[name] = np.zeros(self.layout[name][1]) if grad is None else grad
        return ParameterVector.from_arrays(grads)

    @classmethod
    def merge(cls, parts: Dict[str, "ParameterVector"]) -> "ParameterVector":
        """Concatenate vectors, prefixing names with '<part>/'."""
        arrays = {}
        for prefix, vector in parts.items():
            for name in vector.layout:
                arrays[f"{prefix}/{name}"] = vector[name]
        return cls.from_arrays(arrays)

    def part(self, prefix: str) -> "ParameterVector":
        """Inverse of ``merge`` for one prefix."""
        head = f"{prefix}/"
        return ParameterVector.from_arrays(
            {name[len(head):]: self[name] for name in self.layout if name.startswith(head)})


# ---------------------------------------------------------------------------
# Readout pieces
# ---------------------------------------------------------------------------

def bump_centers(J: int, T: int) -> Tuple[np.ndarray, float]:
    """J centers evenly spaced in (0, T) and their spacing w."""
    if J < 1:
        raise InvalidArgumentError(f"bump count must be positive, got {J}")
    width = T / J
    return (np.arange(1, J + 1) - 0.5) * width, width


def bump_weights(t: np.ndarray, J: int, T: int) -> np.ndarray:
    """Softmax-normalized Gaussian bumps g_j(t) for every entry of t, shape [..., J]."""
    centers, width = bump_centers(J, T)
    t = np.asarray(t, dtype=np.float64)[..., None]
    logits = -((t - centers) ** 2) / (2.0 * width ** 2)
    return ad.softmax(logits, axis=-1)


def bump_basis(t: int, J: int, T: int) -> np.ndarray:
    """
    g_1(t) .. g_J(t), nonnegative and summing to one.

    Args:
        t: time step in [1, T]
        J: number of bumps
        T: trajectory length

    Returns:
        Weight vector of length J
    """
    if J < 1:
        raise InvalidArgumentError(f"bump count must be positive, got {J}")
    if not 1 <= t <= T:
        raise InvalidArgumentError(f"time step {t} outside [1, {T}]")
    return bump_weights(np.asarray(t), J, T)


def transform_readout(z_mu, z_sigma, x_t, logit_beta):
    """Perturbation of the forward kernel; accepts arrays or Tensors."""
    variance = ad.sigmoid(z_sigma + logit_beta)
    mean = (x_t - z_mu) * (1.0 - variance) + z_mu
    return mean, variance


def readout_transform(z_mu: np.ndarray, z_sigma: np.ndarray, x_t: np.ndarray, beta_t: float) -> DiagonalDistribution:
    """
    Turn network outputs into reverse-kernel moments around the forward kernel.

    Sigma_ii = logistic(z_sigma_i + logit(beta_t)),
    mu_i = (x_t_i - z_mu_i) (1 - Sigma_ii) + z_mu_i.
    """
    if not 0.0 < beta_t < 1.0:
        raise InvalidArgumentError(f"beta_t must lie strictly inside (0, 1), got {beta_t}")
    mean, variance = transform_readout(
        np.asarray(z_mu, dtype=np.float64), np.asarray(z_sigma, dtype=np.float64),
        np.asarray(x_t, dtype=np.float64), float(_np_logit(beta_t)))
    return DiagonalDistribution.gaussian(mean, variance)


# ---------------------------------------------------------------------------
# Reverse models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReverseModel:
    """
    Shared machinery of the reverse-kernel families.

    ``kernel`` works on states shaped [S, B, d] where all B rows of slice s sit
    at time step ``t[s]``; it returns Tensors when any input is a Tensor.
    """

    spec: DiffusionSpec
    params: ParameterVector
    readout: str = "per_step"
    bump_count: int = 10

    architecture: ClassVar[str] = ""
    output_kind: ClassVar[str] = ""

    @property
    def parameters(self) -> ParameterVector:
        return self.params

    @property
    def readout_rows(self) -> int:
        return self.spec.T if self.readout == "per_step" else self.bump_count

    def with_parameters(self, params: ParameterVector) -> "ReverseModel":
        return replace(self, params=params)

    def with_spec(self, spec: DiffusionSpec) -> "ReverseModel":
        return replace(self, spec=spec)

    def hyperparameters(self) -> Dict[str, object]:
        return {"architecture": self.architecture, "readout": self.readout, "bump_count": self.bump_count}

    def kernel(self, tensors: Tensors, x, t: np.ndarray, beta):
        raise NotImplementedError

    def _readout(self, tensors: Tensors, prefix: str, t: np.ndarray):
        """Per-slice readout weight [S, H, d] and bias [S, 1, d]."""
        weight = tensors[f"{prefix}.weight"]
        bias = tensors[f"{prefix}.bias"]
        S = t.shape[0]
        d = self.spec.dim
        if self.readout == "per_step":
            w_t = ad.take(weight, t - 1, axis=0)
            b_t = ad.take(bias, t - 1, axis=0)
        else:
            g = bump_weights(t, self.bump_count, self.spec.T)
            w_t = ad.einsum("sj,jhd->shd", g, weight)
            b_t = ad.einsum("sj,jd->sd", g, bias)
        return w_t, b_t.reshape(S, 1, d)


@dataclass(frozen=True)
class RbfReverseModel(ReverseModel):
    """Normalized RBF network with a hidden layer shared by f_mu and f_Sigma."""

    hidden: int = 16
    use_readout_transform: bool = True

    architecture: ClassVar[str] = "rbf"
    output_kind: ClassVar[str] = "gaussian"

    def hyperparameters(self) -> Dict[str, object]:
        return {**super().hyperparameters(), "hidden": self.hidden,
                "use_readout_transform": self.use_readout_transform}

    def basis(self, tensors: Tensors, x):
        """Normalized basis activations [S, B, H]; they sum to one over H."""
        S, B, d = x.shape
        diff = x.reshape(S, B, 1, d) - tensors["rbf.centers"]
        sq = ad.reduce_sum(diff * diff, axis=-1)
        inv_two_w2 = 0.5 * ad.exp(-2.0 * tensors["rbf.log_width"])
        return ad.softmax(-sq * inv_two_w2, axis=-1)

    def kernel(self, tensors: Tensors, x, t: np.ndarray, beta):
        S = t.shape[0]
        phi = self.basis(tensors, x)
        w_mu, b_mu = self._readout(tensors, "readout.mu", t)
        w_sigma, b_sigma = self._readout(tensors, "readout.sigma", t)
        z_mu = ad.einsum("sbh,shd->sbd", phi, w_mu) + b_mu
        z_sigma = ad.einsum("sbh,shd->sbd", phi, w_sigma) + b_sigma
        if not self.use_readout_transform:
            return z_mu, ad.sigmoid(z_sigma)
        beta_t = clamp_rate(ad.take(beta, t - 1, axis=0)).reshape(S, 1, 1)
        return transform_readout(z_mu, z_sigma, x, ad.logit(beta_t))


@dataclass(frozen=True)
class MlpReverseModel(ReverseModel):
    """
    Sigmoid MLP whose hidden weights are shared across all time steps.

    With the readout transform the readout is added to the logit of the
    forward rate x_t (1 - beta_t) + p beta_t, so a zero readout reproduces
    the forward kernel.
    """

    hidden_sizes: Tuple[int, ...] = (50, 50, 50)
    use_readout_transform: bool = False

    architecture: ClassVar[str] = "mlp"
    output_kind: ClassVar[str] = "bernoulli"

    def hyperparameters(self) -> Dict[str, object]:
        return {**super().hyperparameters(), "hidden_sizes": list(self.hidden_sizes),
                "use_readout_transform": self.use_readout_transform}

    def kernel(self, tensors: Tensors, x, t: np.ndarray, beta=None):
        h = 2.0 * x - 1.0
        for layer in range(len(self.hidden_sizes)):
            h = ad.sigmoid(ad.einsum("sbi,io->sbo", h, tensors[f"hidden.{layer}.weight"])
                           + tensors[f"hidden.{layer}.bias"])
        w_t, b_t = self._readout(tensors, "readout", t)
        z = ad.einsum("sbh,shd->sbd", h, w_t) + b_t
        if not self.use_readout_transform:
            return ad.sigmoid(z)
        if beta is None:
            beta = self.spec.schedule.beta
        beta_t = ad.take(beta, t - 1, axis=0).reshape(t.shape[0], 1, 1)
        forward_rate = clamp_rate(x * (1.0 - beta_t) + self.spec.equilibrium_rate * beta_t)
        return ad.sigmoid(z + ad.logit(forward_rate))


@dataclass(frozen=True)
class StationaryReverseModel(ReverseModel):
    """
    Parameter-free kernel N(sqrt(1 - beta_t) x_t, beta_t I).

    This is the true reverse kernel when q(x_0) = N(0, I), which makes it the
    reference model for bound and likelihood checks.
    """

    architecture: ClassVar[str] = "stationary"
    output_kind: ClassVar[str] = "gaussian"

    def kernel(self, tensors: Tensors, x, t: np.ndarray, beta):
        beta_t = ad.take(beta, t - 1, axis=0).reshape(t.shape[0], 1, 1)
        return ad.sqrt(1.0 - beta_t) * x, beta_t + 0.0 * x


def stationary_model(spec: DiffusionSpec) -> StationaryReverseModel:
    if spec.kind != "gaussian":
        raise KindMismatchError("the stationary reverse model needs gaussian diffusion")
    return StationaryReverseModel(spec=spec, params=ParameterVector.from_arrays({}))


def _readout_arrays(prefix: str, rows: int, fan_in: int, d: int) -> Dict[str, np.ndarray]:
    return {f"{prefix}.weight": np.zeros((rows, fan_in, d)), f"{prefix}.bias": np.zeros((rows, d))}


def build_rbf_model(spec: DiffusionSpec, data: np.ndarray, rng: np.random.Generator, hidden: int = 16,
                    readout: str = "per_step", bump_count: int = 10,
                    use_readout_transform: bool = True) -> RbfReverseModel:
    """
    Initialize an RBF reverse model.

    Centers are sampled training points, every width starts at the median
    inter-center distance, and readouts start at zero so the initial kernel is
    the forward-like N(x_t (1 - beta_t), beta_t).
    """
    if spec.kind != "gaussian":
        raise KindMismatchError("the rbf reverse model needs gaussian diffusion")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != spec.dim:
        raise InvalidArgumentError(f"expected data of shape [n, {spec.dim}]")
    centers = data[rng.choice(data.shape[0], size=hidden, replace=data.shape[0] < hidden)]
    gaps = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1))[np.triu_indices(hidden, 1)]
    width = float(np.median(gaps)) if gaps.size and np.median(gaps) > 0 else 1.0
    rows = spec.T if readout == "per_step" else bump_count
    arrays = {"rbf.centers": centers, "rbf.log_width": np.full(hidden, np.log(width))}
    arrays.update(_readout_arrays("readout.mu", rows, hidden, spec.dim))
    arrays.update(_readout_arrays("readout.sigma", rows, hidden, spec.dim))
    logger.debug("rbf model: %d hidden units, width %.4f, %d readout rows", hidden, width, rows)
    return RbfReverseModel(spec=spec, params=ParameterVector.from_arrays(arrays), readout=readout,
                           bump_count=bump_count, hidden=hidden, use_readout_transform=use_readout_transform)


def build_mlp_model(spec: DiffusionSpec, rng: np.random.Generator, hidden_sizes: Tuple[int, ...] = (50, 50, 50),
                    readout: str = "per_step", bump_count: int = 10,
                    use_readout_transform: bool = False) -> MlpReverseModel:
    """
    Initialize an MLP reverse model.

    Hidden weights ~ N(0, 1/fan_in), biases zero, readout zero: rate 0.5, or
    the forward kernel rate under the readout transform.
    """
    if spec.kind != "binomial":
        raise KindMismatchError("the mlp reverse model needs binomial diffusion")
    arrays: Dict[str, np.ndarray] = {}
    fan_in = spec.dim
    for layer, width in enumerate(hidden_sizes):
        arrays[f"hidden.{layer}.weight"] = rng.standard_normal((fan_in, width)) / np.sqrt(fan_in)
        arrays[f"hidden.{layer}.bias"] = np.zeros(width)
        fan_in = width
    rows = spec.T if readout == "per_step" else bump_count
    arrays.update(_readout_arrays("readout", rows, fan_in, spec.dim))
    return MlpReverseModel(spec=spec, params=ParameterVector.from_arrays(arrays), readout=readout,
                           bump_count=bump_count, hidden_sizes=tuple(hidden_sizes),
                           use_readout_transform=use_readout_transform)


def model_from_parameters(spec: DiffusionSpec, params: ParameterVector,
                          hyperparameters: Dict[str, object]) -> ReverseModel:
    """Rebuild a model from stored hyperparameters (checkpoint loading)."""
    architecture = hyperparameters.get("architecture")
    common = {"readout": str(hyperparameters.get("readout", "per_step")),
              "bump_count": int(hyperparameters.get("bump_count", 10))}
    if architecture == "rbf":
        model: ReverseModel = RbfReverseModel(
            spec=spec, params=params, hidden=int(hyperparameters["hidden"]),
            use_readout_transform=bool(hyperparameters.get("use_readout_transform", True)), **common)
    elif architecture == "stationary":
        model = StationaryReverseModel(spec=spec, params=params, **common)
    elif architecture == "mlp":
        model = MlpReverseModel(spec=spec, params=params,
                                hidden_sizes=tuple(int(h) for h in hyperparameters["hidden_sizes"]),
                                use_readout_transform=bool(hyperparameters.get("use_readout_transform", False)),
                                **common)
    else:
        raise InvalidArgumentError(f"unknown architecture {architecture!r}")
    if model.output_kind != spec.distribution_kind:
        raise KindMismatchError(f"{architecture} model cannot drive {spec.kind} diffusion")
    return model


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def reverse_apply(model: ReverseModel, x_t: np.ndarray, t: int) -> DiagonalDistribution:
    """
    The reverse kernel p(x_{t-1} | x_t) produced by the model.

    Args:
        model: trained or freshly built reverse model
        x_t: state of shape [d] or [B, d]
        t: time step in [1, T]

    Returns:
        Gaussian moments (rbf) or Bernoulli rates (mlp), shaped like x_t
    """
    spec = model.spec
    if not 1 <= t <= spec.T:
        raise InvalidArgumentError(f"time step {t} outside [1, {spec.T}]")
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise InvalidArgumentError(f"state has dimension {x.shape[-1]}, model expects {spec.dim}")
    batch = x.reshape(1, -1, spec.dim)
    out = model.kernel(model.params.as_constants(), batch, np.array([t]), spec.schedule.beta)
    if model.output_kind == "gaussian":
        mean, variance = out
        return DiagonalDistribution.gaussian(ad.value_of(mean).reshape(x.shape),
                                             ad.value_of(variance).reshape(x.shape))
    return DiagonalDistribution.bernoulli(ad.value_of(out).reshape(x.shape))


def _parameters_of(model) -> ParameterVector:
    return model if isinstance(model, ParameterVector) else model.parameters


def evaluate_with_gradients(model, objective: Objective) -> Tuple[float, ParameterVector]:
    """
    Value and exact reverse-mode gradient of a scalar objective.

    Args:
        model: a ParameterVector or anything exposing ``.parameters``
        objective: maps the named parameter Tensors to a scalar Tensor

    Returns:
        (objective value, gradient with the same layout as the parameters)
    """
    params = _parameters_of(model)
    tensors = params.as_tensors()
    out = objective(tensors)
    if not isinstance(out, Tensor):
        value = float(np.asarray(out))
        return value, params.with_values(np.zeros(len(params)))
    if out.value.size != 1:
        raise InvalidArgumentError(f"objective must be scalar, got shape {out.shape}")
    if not np.isfinite(out.value).all():
        bad = ad.first_nonfinite(out) or out
        raise NonFiniteError(f"non-finite value at node '{bad.label}'", node=bad.label)
    out.backward()
    grad = params.gradient_from(tensors)
    if not np.isfinite(grad.values).all():
        name = next(n for n in grad.names() if not np.isfinite(grad[n]).all())
        raise NonFiniteError(f"non-finite gradient for parameter '{name}'", node=name)
    return float(out.value), grad


def finite_difference_check(model, objective: Objective, eps: float = 1e-5) -> float:
    """
    Compare the reverse-mode gradient with central differences.

    Returns:
        max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidArgumentError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = _parameters_of(model)
    _, grad = evaluate_with_gradients(params, objective)

    def value_at(values: np.ndarray) -> float:
        return float(ad.value_of(objective(params.with_values(values).as_constants())))

    worst = 0.0
    base = params.values.copy()
    for i in range(len(params)):
        step = base.copy()
        step[i] = base[i] + eps
        f_plus = value_at(step)
        step[i] = base[i] - eps
        f_minus = value_at(step)
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grad.values[i]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric)))
    logger.debug("finite difference check over %d coordinates: max relative error %.3e", len(params), worst)
    return worst
